//! File formats, dataset manifests, checkpoints and command implementations around
//! `weatherir-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod imageio;
pub mod manifest;

pub use error::{CliError, Result};
