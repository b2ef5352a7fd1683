//! Resumable training state on disk.
//!
//! Each checkpoint is a directory `ckpt-NNNNNN` (the outer step, zero
//! padded) holding `params.ckpt`, the Adam moments `adam_m.ckpt` and
//! `adam_v.ckpt` when present, and `state.json`. The directory is written
//! under a temporary name and renamed into place, so a listed checkpoint is
//! always complete.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use metaprep::metatrain::TrainState;
use metaprep::model::{load_checkpoint, save_checkpoint, CheckpointError};
use metaprep::optim::OptimizerState;
use metaprep::rng::StreamPosition;

pub const PARAMS_FILE: &str = "params.ckpt";
pub const STATE_FILE: &str = "state.json";
const ADAM_M_FILE: &str = "adam_m.ckpt";
const ADAM_V_FILE: &str = "adam_v.ckpt";
const PREFIX: &str = "ckpt-";

#[derive(Debug, Error)]
pub enum StateError {
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("{0}: {1}")]
    Checkpoint(String, CheckpointError),
    #[error("{0}: {1}")]
    Json(String, serde_json::Error),
}

/// Everything besides tensors needed to resume a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub run_id: String,
    /// Outer (meta-test) steps completed.
    pub step: usize,
    pub k: usize,
    pub total_meta_test_steps: usize,
    pub rng_key: u64,
    pub rng_counter: u64,
    pub adam_t: u64,
    pub evaluations: u64,
}

pub fn checkpoint_dir(out: &Path, step: usize) -> PathBuf {
    out.join(format!("{PREFIX}{step:06}"))
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> StateError + '_ {
    move |e| StateError::Io(path.display().to_string(), e)
}

pub fn save(out: &Path, run_id: &str, k: usize, total: usize, state: &TrainState) -> Result<PathBuf, StateError> {
    let dir = checkpoint_dir(out, state.step);
    let tmp = out.join(format!(".{PREFIX}{:06}.tmp", state.step));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io(&tmp))?;
    let ck = |name: &str, p| {
        let path = tmp.join(name);
        save_checkpoint(&path, p).map_err(|e| StateError::Checkpoint(path.display().to_string(), e))
    };
    ck(PARAMS_FILE, &state.params)?;
    if let Some(m) = &state.optimizer.m {
        ck(ADAM_M_FILE, m)?;
    }
    if let Some(v) = &state.optimizer.v {
        ck(ADAM_V_FILE, v)?;
    }
    let file = StateFile {
        run_id: run_id.into(),
        step: state.step,
        k,
        total_meta_test_steps: total,
        rng_key: state.rng.key,
        rng_counter: state.rng.counter,
        adam_t: state.optimizer.t,
        evaluations: state.evaluations,
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| StateError::Json(tmp.display().to_string(), e))?;
    fs::write(tmp.join(STATE_FILE), json + "\n").map_err(io(&tmp))?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io(&dir))?;
    }
    fs::rename(&tmp, &dir).map_err(io(&dir))?;
    Ok(dir)
}

pub fn read_state_file(dir: &Path) -> Result<StateFile, StateError> {
    let path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    serde_json::from_str(&text).map_err(|e| StateError::Json(path.display().to_string(), e))
}

pub fn load(dir: &Path) -> Result<(StateFile, TrainState), StateError> {
    let file = read_state_file(dir)?;
    let ck = |name: &str| {
        let path = dir.join(name);
        load_checkpoint(&path).map_err(|e| StateError::Checkpoint(path.display().to_string(), e))
    };
    let optional = |name: &str| {
        if dir.join(name).exists() {
            ck(name).map(Some)
        } else {
            Ok(None)
        }
    };
    let state = TrainState {
        params: ck(PARAMS_FILE)?,
        optimizer: OptimizerState {
            t: file.adam_t,
            m: optional(ADAM_M_FILE)?,
            v: optional(ADAM_V_FILE)?,
        },
        step: file.step,
        rng: StreamPosition {
            key: file.rng_key,
            counter: file.rng_counter,
        },
        evaluations: file.evaluations,
    };
    Ok((file, state))
}

/// The highest-step complete checkpoint directory under `out`.
pub fn latest(out: &Path) -> Result<Option<PathBuf>, StateError> {
    if !out.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(out).map_err(io(out))? {
        let path = entry.map_err(io(out))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix(PREFIX))
            .and_then(|s| s.parse::<usize>().ok());
        if let Some(step) = step {
            if path.join(STATE_FILE).exists() && best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}
