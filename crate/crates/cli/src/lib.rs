//! Driver for the staged pipeline: corpus generation, reconstruction,
//! continual pretraining, mixed fine-tuning, policy training, evaluation and
//! latency reports. Each command reads a TOML [`RunConfig`] and writes its
//! artifacts plus `manifest.json` into the output directory.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod needle;

pub use commands::{run, Command, Session};
pub use config::RunConfig;

/// Bad flags, an unreadable or invalid config, or a refused overwrite.
/// Exits with status 1; every other failure exits with 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);
