//! Command-line front end for ecpc: data ingest, commands, metrics and the
//! simulation study.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod simulate;

pub use config::{Cli, Command, RunConfig, SelectSpec};
pub use error::{CliError, Result};
