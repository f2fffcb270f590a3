//! On-disk layout of one run:
//!
//! ```text
//! <dir>/config.kv       snapshot, written before the first step
//! <dir>/metrics.csv     step,lr,loss,source
//! <dir>/checkpoint.bin
//! <dir>/eval.json       optional
//! <dir>/COMPLETE        marker; the directory is read-only afterwards
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::EvalMetrics;
use crate::training::{write_metrics_csv, Checkpoint, MetricsRow};

pub const CONFIG_FILE: &str = "config.kv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const EVAL_FILE: &str = "eval.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const COMPLETE_MARKER: &str = "COMPLETE";

#[derive(Debug, Clone)]
pub struct RunDirectory {
    path: PathBuf,
}

impl RunDirectory {
    /// Creates `path` (and parents). A completed run is never reopened.
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if path.join(COMPLETE_MARKER).exists() {
            return Err(Error::Config(format!(
                "{} holds a completed run; choose another output directory",
                path.display()
            )));
        }
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))
    }

    pub fn write_config(&self, snapshot: &str) -> Result<()> {
        self.write(CONFIG_FILE, snapshot.as_bytes())
    }

    pub fn write_metrics(&self, rows: &[MetricsRow]) -> Result<()> {
        write_metrics_csv(self.file(METRICS_FILE), rows)
    }

    pub fn save_checkpoint(&self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.save(self.file(CHECKPOINT_FILE))
    }

    pub fn write_eval(&self, metrics: &EvalMetrics) -> Result<()> {
        let mut json = serde_json::to_string_pretty(metrics)?;
        json.push('\n');
        self.write(EVAL_FILE, json.as_bytes())
    }

    pub fn mark_complete(&self) -> Result<()> {
        self.write(COMPLETE_MARKER, b"")
    }

    pub fn is_complete(&self) -> bool {
        self.file(COMPLETE_MARKER).exists()
    }
}
