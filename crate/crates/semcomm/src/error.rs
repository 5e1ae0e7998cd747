//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The CLI maps `Config` to exit code 1 and everything else to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Input shapes or geometry do not conform (rejected input).
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration value or combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed file content; `offset` is a byte offset where known.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// Numeric failure (non-finite intermediate, degenerate value).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
