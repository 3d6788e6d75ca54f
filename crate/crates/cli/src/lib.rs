//! File formats, run configuration and subcommands of the `trax` tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod regionprops;

pub use config::RunConfig;
pub use error::CliError;
