//! Line-delimited training log records.

use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// One optimizer-step record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainLogRecord {
    pub step: usize,
    pub stage: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_diff_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_diff_2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_con: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_rec: Option<f64>,
    pub lr: f32,
}

/// Appends records as JSON lines.
pub fn write_log(path: &Path, records: &[TrainLogRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?,
    );
    for rec in records {
        serde_json::to_writer(&mut file, rec)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Mean of the first and last `window` one-step losses, for trend checks.
pub fn smoothed_endpoints(records: &[TrainLogRecord], window: usize) -> Option<(f64, f64)> {
    let losses: Vec<f64> = records.iter().filter_map(|r| r.l_diff_1).collect();
    if losses.len() < window * 2 {
        return None;
    }
    let head = losses[..window].iter().sum::<f64>() / window as f64;
    let tail = losses[losses.len() - window..].iter().sum::<f64>() / window as f64;
    Some((head, tail))
}
