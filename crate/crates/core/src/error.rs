//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or degenerate (zero) dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Invalid configuration (widths, modes, flag combinations).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates the documented schema. The message names the
    /// offending field.
    #[error("schema violation: {0}")]
    Schema(String),

    /// Checkpoint format version is not supported by this build.
    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    /// A requested evaluation split contains no examples.
    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
