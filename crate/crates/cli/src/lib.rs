//! Experiment orchestration around `sepsis-core`: configuration, pipeline
//! stages with reproducibility manifests, and the inference service.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod serve;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use manifest::Manifest;
