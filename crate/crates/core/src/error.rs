use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// More gold entities than queries.
    #[error("capacity error: {what} has {gold} gold entities but only {queries} queries (increase u)")]
    Capacity {
        what: String,
        gold: usize,
        queries: usize,
    },

    #[error("gold entity is groundable but the example has no candidate regions")]
    UnmatchableRegion,

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}:{line}: validation error: {message}")]
    Validation {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint load error: {0}")]
    Load(String),

    #[error("nothing to benchmark")]
    NothingToBenchmark,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
