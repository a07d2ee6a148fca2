//! Experiment orchestration on top of `damavl-core`.
//!
//! A run is one (arm, seed) cell: train for `K` episodes, then evaluate the
//! CCE-gap of the truncated output policy `π^k` at a fixed cadence. Cells run
//! on a worker pool and their CSV rows are merged in run-id order.

pub mod config;
pub mod output;
pub mod plot;
pub mod presets;
pub mod runner;

use std::path::PathBuf;

use thiserror::Error;

/// Environment variable holding the worker count.
pub const WORKERS_ENV: &str = "DAMAVL_WORKERS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error(transparent)]
    Core(#[from] damavl_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("malformed input: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(vec![msg.into()])
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration errors, 3 for guard breaches, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use damavl_core::Error as E;
        match self {
            Self::Config(_) | Self::Json(_) => 2,
            Self::Core(E::Guard { .. }) => 3,
            Self::Core(E::Config(_) | E::Domain(_) | E::InvalidGame(_) | E::Dimension(_) | E::Json(_)) => 2,
            _ => 1,
        }
    }
}

/// Worker count from [`WORKERS_ENV`], defaulting to the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
