//! Experiment harness for saslab: configuration, training with checkpoints,
//! per-checkpoint measurement, onset analysis, sweeps, seed correlations and
//! plot data.

pub mod analysis;
pub mod config;
pub mod data;
pub mod error;
pub mod measure;
pub mod plots;
pub mod store;
pub mod sweep;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{LabError, LabResult};
pub use store::{RunManifest, RunStatus};
pub use train::{run_experiment, RunOptions};
