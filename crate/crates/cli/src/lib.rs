//! Command line, configuration, CSV ingestion and model artifacts for the
//! `regcopula` core crate.
//!
//! Exit codes: 0 on success, 2 for input errors, 3 for numerical failures.

pub mod artifact;
pub mod cli;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;

pub use artifact::{ModelArtifact, Storage};
pub use error::{CliError, CliResult};
