//! JSON-lines metrics.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub wall_time: f64,
    pub stage: String,
    pub step: u64,
    pub loss: Option<f64>,
    pub eps_so_far: Option<f64>,
    pub extra: Map<String, Value>,
}

/// Appends records to a file, flushing each line, or keeps them in memory.
#[derive(Debug)]
pub struct Metrics {
    sink: Option<(PathBuf, File)>,
    start: Instant,
    kept: Vec<MetricRecord>,
    keep: bool,
}

impl Metrics {
    /// Appends to `path`, creating it and its directory as needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Metrics {
            sink: Some((path.to_path_buf(), file)),
            start: Instant::now(),
            kept: Vec::new(),
            keep: false,
        })
    }

    /// Keeps records in memory only.
    pub fn in_memory() -> Self {
        Metrics {
            sink: None,
            start: Instant::now(),
            kept: Vec::new(),
            keep: true,
        }
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn emit(
        &mut self,
        stage: &str,
        step: u64,
        loss: Option<f64>,
        eps_so_far: Option<f64>,
        extra: Map<String, Value>,
    ) -> Result<()> {
        let rec = MetricRecord {
            wall_time: self.elapsed(),
            stage: stage.to_string(),
            step,
            loss: loss.filter(|l| l.is_finite()),
            eps_so_far: eps_so_far.filter(|e| e.is_finite()),
            extra,
        };
        if let Some((path, file)) = &mut self.sink {
            let mut line = serde_json::to_string(&rec)?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        if self.keep {
            self.kept.push(rec);
        }
        Ok(())
    }

    /// Records kept by [`Metrics::in_memory`].
    pub fn records(&self) -> &[MetricRecord] {
        &self.kept
    }
}

/// Builds an `extra` map from `key => value` pairs.
#[macro_export]
macro_rules! extra {
    ($($k:literal => $v:expr),* $(,)?) => {{
        #[allow(unused_mut)]
        let mut m = serde_json::Map::new();
        $(m.insert($k.to_string(), serde_json::json!($v));)*
        m
    }};
}
