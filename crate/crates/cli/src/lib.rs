//! Experiment driver: configuration, metrics logs, resumable pre-training,
//! fine-tuning studies, the gradient-check suite and plot-ready reports.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod gradcheck;
pub mod records;
pub mod state;

pub use commands::CliError;
pub use config::ExperimentConfig;
