//! Config-driven experiment runner for `streamssl`.
//!
//! A TOML [`config::ExperimentConfig`] names a stream, buffer, learner,
//! bandwidth budget and a list of arms to compare; [`runner::run_experiment`]
//! executes every arm for every seed and writes CSV and JSON outputs.

pub mod analytics;
pub mod compare;
pub mod config;
pub mod experiment;
pub mod runner;

pub use config::{ExperimentConfig, ExperimentKind};
pub use runner::{run_experiment, ExperimentOutput};
