//! Pipeline commands behind the `mrbev` binary.

pub mod commands;
pub mod config;
pub mod datadir;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
