//! The `evolq` command-line tool: synthetic data, quantization, scale search,
//! landscape probes and optimizer comparisons, each writing a manifest of
//! what it read and produced.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use cli::{run, Cli};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
