//! Command-line driver: run configuration, argument parsing and the
//! commands that write metrics, checkpoints and CSV exports.

pub mod args;
pub mod commands;
pub mod config;

pub use args::{Cli, Command};
pub use commands::{exit_code, run};
pub use config::RunConfig;
