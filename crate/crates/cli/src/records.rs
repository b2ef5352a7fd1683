//! Metrics logs: one JSON object per line.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Pretrain,
    Finetune,
    Check,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub step: u64,
    pub phase: Phase,
    pub metrics: BTreeMap<String, f64>,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

impl RunRecord {
    pub fn new(run_id: impl Into<String>, step: u64, phase: Phase, metrics: BTreeMap<String, f64>) -> Self {
        Self {
            run_id: run_id.into(),
            step,
            phase,
            metrics,
            timestamp: now(),
        }
    }

    /// Equality ignoring the timestamp.
    pub fn same_content(&self, other: &Self) -> bool {
        (&self.run_id, self.step, self.phase, &self.metrics) == (&other.run_id, other.step, other.phase, &other.metrics)
    }
}

pub fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("{path}:{line}: {message}")]
    Corrupt { path: String, line: usize, message: String },
    #[error("{path}: duplicate record ({run_id}, {phase:?}, step {step}, {metric})")]
    Duplicate {
        path: String,
        run_id: String,
        phase: Phase,
        step: u64,
        metric: String,
    },
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
}

/// Appends records, flushing after each call.
pub struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn append(path: &Path) -> Result<Self, LogError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| LogError::Io(path.display().to_string(), e))?;
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, records: &[RunRecord]) -> std::io::Result<()> {
        for r in records {
            serde_json::to_writer(&mut self.out, r)?;
            self.out.write_all(b"\n")?;
        }
        self.out.flush()
    }
}

/// Every record of a log, checked for the uniqueness invariant.
pub fn read_log(path: &Path) -> Result<Vec<RunRecord>, LogError> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| LogError::Io(name.clone(), e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LogError::Io(name.clone(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RunRecord = serde_json::from_str(&line).map_err(|e| LogError::Corrupt {
            path: name.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    check_unique(&name, &records)?;
    Ok(records)
}

fn check_unique(path: &str, records: &[RunRecord]) -> Result<(), LogError> {
    let mut seen = HashSet::new();
    for r in records {
        for metric in r.metrics.keys() {
            if !seen.insert((&r.run_id, r.phase, r.step, metric)) {
                return Err(LogError::Duplicate {
                    path: path.into(),
                    run_id: r.run_id.clone(),
                    phase: r.phase,
                    step: r.step,
                    metric: metric.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Overwrite `path` with `records`.
pub fn rewrite_log(path: &Path, records: &[RunRecord]) -> Result<(), LogError> {
    let io = |e| LogError::Io(path.display().to_string(), e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| LogError::Io(path.display().to_string(), e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}
