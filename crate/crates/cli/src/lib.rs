//! Command-line front end for balanced crossed random-effects models.

pub mod commands;
pub mod error;
pub mod ingest;

pub use error::{CliError, CliResult};
