//! Command-line orchestration of the HAT harness, plus the oracle checks
//! behind `hat selftest`.

#![allow(clippy::needless_range_loop)]

pub mod artifacts;
pub mod checks;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;

pub use commands::{run, Cli, Command};
pub use config::{BaselineConfig, ExperimentConfig, ModelConfig, SCHEMA};
pub use error::CliError;
