//! Experiment orchestration: configuration, dataset generation, training
//! dispatch, evaluation tables, volumetry, and figures. The `anomap` binary
//! is a thin CLI over these functions; tests drive them directly.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod paths;
pub mod report;
pub mod reconstruct;
pub mod train;
pub mod volumetry_cmd;

pub use config::{AblationVariant, ExperimentConfig, ModelFamily, TrainVariant};
pub use paths::RunPaths;
