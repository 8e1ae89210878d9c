//! File formats, configuration, reports and subcommands of the `rigidflow`
//! command-line tool.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod format;
pub mod report;

pub use error::{CliError, Result};
