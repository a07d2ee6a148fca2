//! Long-format CSV rows, run summaries and the run manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{HarnessError, Result};

/// One CSV record: `run_id, variant, seed, episode, agent, metric, value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub run_id: String,
    pub variant: String,
    pub seed: u64,
    pub episode: u64,
    /// Agent index, or `all` for joint metrics.
    pub agent: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub label: String,
    pub variant: String,
    pub seed: u64,
    pub episodes: u64,
    /// Mean gap over the evaluation points in the last `window` episodes.
    pub final_gap: f64,
    pub last_gap: f64,
    /// Per agent: share of post-burn-in evaluation points with `V̄ ≥ V^†`.
    pub optimism: Vec<f64>,
    /// Per agent: visits of the initial cell that were skipped.
    pub skipped: Vec<u64>,
    /// Per agent: visits of the initial cell that were used.
    pub used: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub run_id: String,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub version: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<String>,
    pub workers: usize,
    pub created_unix: u64,
    pub wall_seconds: f64,
    pub runs: Vec<RunTiming>,
    /// Paths relative to the output directory.
    pub files: Vec<PathBuf>,
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| HarnessError::io(path, e))
}

pub fn write_rows(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<Row>, _>>()?;
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| HarnessError::io(path, e))?;
    w.flush().map_err(|e| HarnessError::io(path, e))
}
