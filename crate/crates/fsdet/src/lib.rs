//! Command-line harness around `fsdet-core`: configuration, checkpoints,
//! JSON-lines metrics, dataset export, loop-level oracles and the
//! training / evaluation suite.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod export;
pub mod oracle;
pub mod records;
pub mod suite;

pub use error::{CliError, Result};
