//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by the simulator, learners and evaluators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid game: {0}")]
    InvalidGame(String),
    #[error("parameter outside its domain: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("instance too large: {what} = {value} exceeds limit {limit}")]
    Guard {
        what: String,
        value: u128,
        limit: u128,
    },
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
