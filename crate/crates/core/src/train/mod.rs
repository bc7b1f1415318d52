//! Adam, the tri-state learning-rate schedule, checkpoints, and the
//! pretraining and fine-tuning loops.

mod adam;
mod checkpoint;
mod finetune;
mod pretrain;
mod schedule;

pub use adam::{adam_step, Adam, AdamConfig};
pub use checkpoint::{fingerprint_bytes, Checkpoint, CHECKPOINT_VERSION};
pub use finetune::{finetune_run, transcribe_greedy};
pub use pretrain::pretrain_run;
pub use schedule::TriStateSchedule;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, UtteranceRecord, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Total optimizer updates.
    pub steps: usize,
    /// Utterances per update.
    pub batch_size: usize,
    pub peak_lr: f64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 4,
            peak_lr: 5e-4,
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("pretrain.batch_size must be >= 1".into()));
        }
        if !(self.peak_lr >= 0.0) {
            return Err(Error::Config("pretrain.peak_lr must be >= 0".into()));
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Peak learning rate of the CTC head.
    pub head_lr: f64,
    /// Peak learning rate of every other trained parameter.
    pub body_lr: f64,
    /// Keep the feature encoder fixed (its outputs are then computed once).
    pub freeze_encoder: bool,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 4,
            head_lr: 3e-5,
            body_lr: 1e-5,
            freeze_encoder: true,
            adam: AdamConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("finetune.batch_size must be >= 1".into()));
        }
        if !(self.head_lr >= 0.0 && self.body_lr >= 0.0) {
            return Err(Error::Config("finetune learning rates must be >= 0".into()));
        }
        self.adam.validate()
    }
}

/// One line of the training metrics log. Fine-tuning leaves the
/// pretraining-only columns empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub contrastive: Option<f64>,
    pub diversity: Option<f64>,
    /// Mean codebook perplexity over groups.
    pub perplexity: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,lr,loss,contrastive,diversity,perplexity";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{},{},{}",
            r.step,
            r.lr,
            r.loss,
            opt(r.contrastive),
            opt(r.diversity),
            opt(r.perplexity)
        );
    }
    out
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Loads every record's audio, attributing failures to the utterance id.
pub fn load_waves(records: &[UtteranceRecord]) -> Result<Vec<Waveform>> {
    records
        .iter()
        .map(|r| load_wav(&r.audio_path).map_err(|e| e.for_utterance(&r.id)))
        .collect()
}

/// Batch indices for one step: `min(batch, n)` distinct records.
pub(crate) fn draw_batch<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, batch: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, batch.min(n)).into_vec()
}

pub(crate) fn batch_ids(records: &[UtteranceRecord], idx: &[usize]) -> String {
    idx.iter()
        .map(|&i| records[i].id.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

/// Maps numeric blow-ups inside a step to an error naming step and batch.
pub(crate) fn step_error(e: Error, step: usize, ids: impl FnOnce() -> String) -> Error {
    match e {
        Error::Grad(voxc_grad::GradError::NonFinite { .. }) => Error::NonFiniteLoss {
            step,
            utterances: ids(),
        },
        other => other,
    }
}
