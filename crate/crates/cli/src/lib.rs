//! Command-line driver: configuration, experiment directories, reports and
//! plots around the `crowdda` library.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{exit_code, resolve_config, run, Cli, Command, NetArgs, DETERMINISTIC_ENV};
pub use config::ExperimentConfig;
