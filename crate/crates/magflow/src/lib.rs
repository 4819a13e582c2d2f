//! Command-line driver for `magflow-core`: run configuration, command
//! dispatch and result files.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{run, Command, RunError};
pub use config::{parse_config, parse_config_str, ConfigError, RunConfig};
