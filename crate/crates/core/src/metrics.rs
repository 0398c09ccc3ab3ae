//! Deterministic CSV emission for training and evaluation artifacts.
//!
//! Every file starts with a one-line schema comment (`# <schema> ...`) so the
//! column layout is versioned independently of the header row, and every row
//! is flushed as soon as it is written so partial runs remain inspectable.
//! Floats are formatted with Rust's shortest round-trip representation, which
//! is a pure function of the value — identical runs produce byte-identical
//! files. Wall-clock timings go to a separate `timing.csv` for exactly that
//! reason: they are the one honest non-deterministic signal.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{CoreError, Result};

/// Schema tag for per-episode training metrics.
pub const METRICS_SCHEMA: &str = "mate-metrics v1";
/// Schema tag for per-episode wall-clock timings.
pub const TIMING_SCHEMA: &str = "mate-timing v1";
/// Schema tag for periodic greedy evaluations.
pub const EVAL_SCHEMA: &str = "mate-eval v1";
/// Schema tag for benchmark timing rows.
pub const BENCH_SCHEMA: &str = "mate-bench v1";
/// Schema tag for benchmark scaling fits.
pub const SCALING_SCHEMA: &str = "mate-scaling v1";

pub const DDQN_COLUMNS: &[&str] = &["episode", "return", "loss", "epsilon"];
pub const SAC_COLUMNS: &[&str] = &["episode", "return", "critic_loss", "actor_loss"];
pub const TIMING_COLUMNS: &[&str] = &["episode", "wall_ms"];
pub const EVAL_COLUMNS: &[&str] = &[
    "episode",
    "mean_return",
    "std_return",
    "min_return",
    "max_return",
];
pub const BENCH_COLUMNS: &[&str] = &[
    "arch",
    "phase",
    "T",
    "t_checkpoint",
    "batch",
    "workers",
    "repeats",
    "median_ns",
    "mad_ns",
];
pub const SCALING_COLUMNS: &[&str] = &["arch", "phase", "slope", "r2", "verdict"];

/// Shortest round-trip decimal form; deterministic for a given bit pattern.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Append-only CSV writer with a fixed column count and per-row flushing.
#[derive(Debug)]
pub struct CsvWriter {
    path: PathBuf,
    w: BufWriter<File>,
    columns: usize,
}

impl CsvWriter {
    /// Create the file, writing the schema comment and the header row.
    pub fn create(path: impl AsRef<Path>, schema: &str, columns: &[&str]) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| {
            CoreError::Io(std::io::Error::new(
                e.kind(),
                format!("creating {}: {e}", path.display()),
            ))
        })?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# {schema} columns={}", columns.len())?;
        writeln!(w, "{}", columns.join(","))?;
        w.flush()?;
        Ok(CsvWriter {
            path,
            w,
            columns: columns.len(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Write one row and flush it. Field counts are enforced; commas inside
    /// fields are rejected rather than quoted — nothing here emits free text.
    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(CoreError::Data(format!(
                "{}: row has {} fields, schema has {}",
                self.path.display(),
                fields.len(),
                self.columns
            )));
        }
        if let Some(bad) = fields.iter().find(|f| f.contains(',') || f.contains('\n')) {
            return Err(CoreError::Data(format!(
                "{}: field `{bad}` contains a delimiter",
                self.path.display()
            )));
        }
        writeln!(self.w, "{}", fields.join(","))?;
        self.w.flush()?;
        Ok(())
    }
}

/// Mean / population-std / min / max of a return sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Summarize evaluation returns. Uses the population standard deviation so a
/// single-episode evaluation is well-defined (std 0).
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(CoreError::Usage("cannot summarize zero values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in values {
        min = min.min(v);
        max = max.max(v);
    }
    Ok(Summary {
        mean,
        std: var.sqrt(),
        min,
        max,
    })
}
