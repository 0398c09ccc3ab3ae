//! Run-directory lifecycle.
//!
//! A run is assembled at a hidden staging path inside the run root and only
//! renamed to its final label once its initial contents (at minimum the
//! resolved config) are in place, so no half-created run is ever visible
//! under a real label. Labels are never overwritten; colliding with an
//! existing run is an error, not a merge.
//!
//! Layout inside a run directory:
//! - `config.resolved` — the fully-resolved configuration that produced it
//! - `metrics.csv`, `timing.csv`, `eval.csv` — training artifacts
//! - `checkpoints/` — parameter snapshots (`ep{N}.ckpt`, `final.ckpt`)
//! - `bench.csv`, `scaling.csv` — benchmark artifacts
//! - `report.txt` — check-suite report

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};

/// Environment variable overriding the run root (default `./runs`).
pub const RUN_ROOT_ENV: &str = "MATE_RUN_ROOT";

pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const BENCH_FILE: &str = "bench.csv";
pub const SCALING_FILE: &str = "scaling.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Resolve the run root from the environment.
pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("./runs"))
}

fn validate_label(label: &str) -> Result<()> {
    if label.is_empty() {
        return Err(CoreError::Config("run label is empty".into()));
    }
    if label.starts_with('.') {
        return Err(CoreError::Config(format!(
            "run label `{label}` may not start with `.`"
        )));
    }
    if label
        .chars()
        .any(|c| !(c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')))
    {
        return Err(CoreError::Config(format!(
            "run label `{label}` may only contain [A-Za-z0-9._-]"
        )));
    }
    Ok(())
}

/// A run directory under construction at a hidden path. Dropped without
/// [`StagedRunDir::commit`], the staging path is removed.
#[derive(Debug)]
pub struct StagedRunDir {
    tmp: PathBuf,
    final_path: PathBuf,
    committed: bool,
}

/// Begin staging a run named `label` under `root`.
pub fn stage(root: &Path, label: &str) -> Result<StagedRunDir> {
    validate_label(label)?;
    let final_path = root.join(label);
    if final_path.exists() {
        return Err(CoreError::Config(format!(
            "run label `{label}` already exists at {}",
            final_path.display()
        )));
    }
    fs::create_dir_all(root)?;
    let tmp = root.join(format!(".staging-{label}-{}", std::process::id()));
    if tmp.exists() {
        return Err(CoreError::Config(format!(
            "stale staging directory {} — remove it and retry",
            tmp.display()
        )));
    }
    fs::create_dir(&tmp)?;
    fs::create_dir(tmp.join(CHECKPOINT_DIR))?;
    Ok(StagedRunDir {
        tmp,
        final_path,
        committed: false,
    })
}

impl StagedRunDir {
    /// Path files should be written to while staging.
    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    /// Atomically publish the staged directory under its final label.
    pub fn commit(mut self) -> Result<RunDir> {
        if self.final_path.exists() {
            return Err(CoreError::Config(format!(
                "run label already exists at {}",
                self.final_path.display()
            )));
        }
        fs::rename(&self.tmp, &self.final_path)?;
        self.committed = true;
        Ok(RunDir {
            path: self.final_path.clone(),
        })
    }
}

impl Drop for StagedRunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// A committed run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Open an existing run directory; it must contain `config.resolved`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.is_dir() {
            return Err(CoreError::Config(format!(
                "{} is not a run directory",
                path.display()
            )));
        }
        if !path.join(CONFIG_FILE).is_file() {
            return Err(CoreError::Config(format!(
                "{} has no {CONFIG_FILE}",
                path.display()
            )));
        }
        Ok(RunDir { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.path.join(CHECKPOINT_DIR).join(name)
    }
}
