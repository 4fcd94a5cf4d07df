//! Command implementations behind the `dego` binary. Each command is a plain
//! function so it can be driven from tests without spawning a process.

pub mod commands;
pub mod config;
pub mod error;

pub use config::{parse_config, parse_config_str, Config};
pub use error::CliError;
