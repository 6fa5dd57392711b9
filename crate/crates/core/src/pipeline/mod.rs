//! The end-to-end run: public pre-training in two steps, DP fine-tuning,
//! synthetic generation, downstream training, evaluation, and baselines.

mod config;
mod metrics;
mod stages;

pub use config::{
    DataSection, DiffusionSection, DpSection, Entry, FinetuneMode, LodaSection, PipelineSection, RunConfig, UNetSection,
};
pub use metrics::{MetricRecord, Metrics};
pub use stages::*;

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// Tags passed to [`crate::rng::derive_seed`] for each stage.
pub mod seed_tag {
    pub const PUBLIC_DATA: u64 = 1;
    pub const PRIVATE_TRAIN: u64 = 2;
    pub const PRIVATE_TEST: u64 = 3;
    pub const UNET_INIT: u64 = 4;
    pub const PRETRAIN1: u64 = 5;
    pub const PRETRAIN2: u64 = 6;
    pub const FINETUNE: u64 = 7;
    pub const GENERATE: u64 = 8;
    pub const DOWNSTREAM: u64 = 9;
    pub const BASELINE: u64 = 10;
    pub const ADAPTER_INIT: u64 = 11;
}

/// Which split of the data a stage read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Public,
    PrivateTrain,
    PrivateTest,
    Synthetic,
}

/// Records every `(stage, split)` read so a run can prove which stages saw
/// the private training images.
#[derive(Debug, Default)]
pub struct AccessLog {
    reads: Mutex<Vec<(String, Split)>>,
}

impl AccessLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, stage: &str, split: Split) {
        self.reads
            .lock()
            .expect("access log poisoned")
            .push((stage.to_string(), split));
    }

    pub fn reads(&self) -> Vec<(String, Split)> {
        self.reads.lock().expect("access log poisoned").clone()
    }

    pub fn stages_reading(&self, split: Split) -> Vec<String> {
        self.reads()
            .into_iter()
            .filter(|(_, s)| *s == split)
            .map(|(st, _)| st)
            .collect()
    }
}

/// A dataset whose every read is logged against the reading stage.
#[derive(Debug)]
pub struct Tracked<'a> {
    data: &'a LabeledDataset,
    split: Split,
    log: &'a AccessLog,
}

impl<'a> Tracked<'a> {
    pub fn new(data: &'a LabeledDataset, split: Split, log: &'a AccessLog) -> Self {
        Tracked { data, split, log }
    }

    pub fn read(&self, stage: &str) -> &'a LabeledDataset {
        self.log.record(stage, self.split);
        self.data
    }

    pub fn split(&self) -> Split {
        self.split
    }
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("run.lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(RunLock { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// File locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }

    pub fn public_data(&self) -> PathBuf {
        self.root.join("data/public.idx")
    }

    pub fn private_train(&self) -> PathBuf {
        self.root.join("data/private_train.idx")
    }

    pub fn private_test(&self) -> PathBuf {
        self.root.join("data/private_test.idx")
    }

    pub fn pretrain1(&self) -> PathBuf {
        self.root.join("ckpt/pretrain1.ckpt")
    }

    pub fn pretrain2(&self) -> PathBuf {
        self.root.join("ckpt/pretrain2.ckpt")
    }

    pub fn finetune(&self, mode: FinetuneMode) -> PathBuf {
        self.root.join(format!("ckpt/finetune_{mode}.ckpt"))
    }

    pub fn synthetic(&self, mode: FinetuneMode) -> PathBuf {
        self.root.join(format!("synthetic_{mode}.idx"))
    }

    pub fn grid(&self, mode: FinetuneMode) -> PathBuf {
        self.root.join(format!("grid_{mode}.pgm"))
    }

    pub fn classifier(&self, mode: FinetuneMode) -> PathBuf {
        self.root.join(format!("ckpt/classifier_{mode}.ckpt"))
    }

    pub fn baseline(&self) -> PathBuf {
        self.root.join("ckpt/baseline_dpsgd.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
}
