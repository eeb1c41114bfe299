//! Synthetic covariate-shift benchmark for predictive spectral calibration:
//! task generation, source pretraining, Source/SSA/PSC adaptation runs and
//! regression metrics.

pub mod error;
pub mod experiment;
pub mod metrics;
pub mod pretrain;
pub mod synthetic;

pub use error::{BenchError, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentResults, Method};
pub use metrics::{evaluate, MetricsReport};
pub use synthetic::{gen_synthetic_task, ShiftFamily, ShiftSpec, SyntheticTask};
