//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DiffcrError>;

#[derive(Debug, Error)]
pub enum DiffcrError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("bitstream: {0}")]
    Bitstream(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("image: {0}")]
    Image(String),

    #[error("training diverged: non-finite value in {term}")]
    NonFinite { term: &'static str },

    #[error("{0}")]
    Invalid(String),
}

impl DiffcrError {
    pub fn bitstream(msg: impl Into<String>) -> Self {
        DiffcrError::Bitstream(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        DiffcrError::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        DiffcrError::Invalid(msg.into())
    }
}
