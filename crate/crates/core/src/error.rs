use thiserror::Error;

/// Errors produced by the calibration library.
#[derive(Debug, Error)]
pub enum PscError {
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NonSymmetric { asymmetry: f64 },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("Jacobi eigensolver did not converge after {sweeps} sweeps (off-diagonal {off_diagonal:e})")]
    NoConvergence { sweeps: usize, off_diagonal: f64 },

    #[error("explained-variance selection produced K = D = {dim}; lower the variance fraction")]
    DegenerateK { dim: usize },

    #[error("invalid support dimension K = {k} for feature dimension D = {d}")]
    InvalidK { k: usize, d: usize },

    #[error("invalid explained-variance fraction {0}; must lie in (0, 1)")]
    InvalidFraction(f64),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),

    #[error("residual floor tau must be positive, got {0}")]
    NonPositiveTau(f64),

    #[error("matrix is not symmetric positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotSpd { min_eigenvalue: f64 },

    #[error("vector is not in the residual complement (support component norm {support_norm:e})")]
    NotInComplement { support_norm: f64 },

    #[error("inconsistent target specification: {0}")]
    InconsistentTarget(String),

    #[error("drift bound violated: drift {drift} > bound {bound}")]
    BoundViolated { drift: f64, bound: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("unsupported file version {0}")]
    UnsupportedVersion(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PscError>;
