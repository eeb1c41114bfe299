use psc_core::PscError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid shift specification: {0}")]
    InvalidSpec(String),

    #[error("labels are constant; R² is undefined")]
    ConstantLabels,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] PscError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// Short machine-readable tag used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            BenchError::InvalidSpec(_) => "invalid_spec",
            BenchError::ConstantLabels => "constant_labels",
            BenchError::Config(_) => "config",
            BenchError::Core(_) => "core",
            BenchError::Io(_) => "io",
            BenchError::Json(_) => "json",
            BenchError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, BenchError>;
