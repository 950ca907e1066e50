//! Experiment orchestration for the `migs` command-line tool.

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{exit_code, Candidate, Method};
pub use config::ExperimentConfig;
