//! Library side of the `lmp` command: configuration, staged outputs, and the
//! simulate / estimate / diagnose / replicate pipeline.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{dispatch, Command};
pub use config::{load_config, RunConfig};
pub use error::CliError;
