use std::io;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A request exceeds a hard resource guard (e.g. too many qubits).
    #[error("resource limit: {0}")]
    Resource(String),

    /// Inputs violate a documented precondition.
    #[error("validation: {0}")]
    Validation(String),

    #[error("tokenization failed at offset {offset}: no vocabulary token matches {remainder:?}")]
    Tokenize { offset: usize, remainder: String },

    /// Malformed input data; `line` is 1-based and counts the header.
    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A self-check found a violated invariant.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}
