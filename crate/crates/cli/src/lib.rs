//! Command-line runner around `openlens-core`: manifests, adapters, batch
//! orchestration and artifact files.

pub mod adapters;
pub mod artifacts;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod runner;

pub use error::{CliError, Result};
