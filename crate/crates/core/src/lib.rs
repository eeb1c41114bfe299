//! Predictive spectral calibration for source-free test-time adaptation of
//! regression models.
//!
//! The crate fits a block spectral model of source features (a top-K
//! support block plus an isotropic residual floor), scores unlabeled target
//! batches with probe-bank SKL matching losses, and adapts the normalization
//! affine parameters of a small regressor by gradient descent on that score.

pub mod adaptation;
pub mod calibration_loss;
pub mod error;
pub mod linalg;
pub mod probe_bank;
pub mod spectral_model;
pub mod theory;

pub use calibration_loss::{
    compute_probe_weights, gaussian_skl_scalar, objective_grad, psc_loss, psc_loss_grad,
    residual_loss, residual_stats, ssa_loss, ssa_loss_grad, support_loss, support_loss_restricted,
    LossGradient, LossReport, ObjectiveKind, PscHyperParams, RegressorHead, ResidualStats,
};
pub use error::{PscError, Result};
pub use probe_bank::{
    probe_moments, recover_moments, source_probe_variance, ProbeBank, ProbeKind, ProbeMoments,
};
pub use spectral_model::{
    fit_source_model, FeatureMatrix, KSelection, ResidualCoords, SourceSpectralModel,
    SupportCoords, DEFAULT_EPS_VAR, DEFAULT_RHO,
};
