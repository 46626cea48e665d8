//! Experiment configuration, artifact files and the command-line runner.

pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;

pub use artifacts::{MetricsRow, Phase};
pub use cli::{run, Cli};
pub use config::{DataSpec, ExperimentConfig, ModelSpec};
