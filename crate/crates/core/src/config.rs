//! Single JSON document holding every tunable of the pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::{DecodeConfig, DEFAULT_BACKOFF, MAX_ORDER};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::PretrainLossConfig;
use crate::train::{FinetuneConfig, PretrainConfig};
use crate::vocab::{CharVocab, ENGLISH_CHARS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub order: usize,
    pub backoff: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            order: MAX_ORDER,
            backoff: DEFAULT_BACKOFF,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeakerConfig {
    /// Minimum cosine similarity for a positive identification.
    pub threshold: f64,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self { threshold: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Width of the duration buckets in the WER report.
    pub bucket_seconds: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            bucket_seconds: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Transcript alphabet; the CTC blank is added implicitly.
    pub vocab: String,
    pub model: ModelConfig,
    pub objective: PretrainLossConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub lm: LmConfig,
    pub decode: DecodeConfig,
    pub speaker: SpeakerConfig,
    pub report: ReportConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab: ENGLISH_CHARS.to_string(),
            model: ModelConfig::default(),
            objective: PretrainLossConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            lm: LmConfig::default(),
            decode: DecodeConfig::default(),
            speaker: SpeakerConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn char_vocab(&self) -> Result<CharVocab> {
        Ok(CharVocab::new(self.vocab.chars())?)
    }

    pub fn validate(&self) -> Result<()> {
        self.char_vocab()?;
        self.model.validate()?;
        self.objective.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.decode.validate()?;
        if !(1..=MAX_ORDER).contains(&self.lm.order) {
            return Err(Error::Config(format!("lm.order must be 1..={MAX_ORDER}")));
        }
        if !(self.lm.backoff > 0.0 && self.lm.backoff <= 1.0) {
            return Err(Error::Config("lm.backoff must be in (0, 1]".into()));
        }
        if !(-1.0..=1.0).contains(&self.speaker.threshold) {
            return Err(Error::Config("speaker.threshold must be in [-1, 1]".into()));
        }
        if !(self.report.bucket_seconds > 0.0) {
            return Err(Error::Config("report.bucket_seconds must be positive".into()));
        }
        Ok(())
    }
}

/// Dotted path of the first leaf where two serializable values differ.
pub(crate) fn first_difference<T: Serialize>(a: &T, b: &T) -> Option<String> {
    fn walk(a: &serde_json::Value, b: &serde_json::Value, path: &str) -> Option<String> {
        use serde_json::Value;
        match (a, b) {
            (Value::Object(x), Value::Object(y)) => {
                for (k, va) in x {
                    let p = if path.is_empty() {
                        k.clone()
                    } else {
                        format!("{path}.{k}")
                    };
                    match y.get(k) {
                        Some(vb) => {
                            if let Some(d) = walk(va, vb, &p) {
                                return Some(d);
                            }
                        }
                        None => return Some(p),
                    }
                }
                y.keys()
                    .find(|k| !x.contains_key(*k))
                    .map(|k| format!("{path}.{k}"))
            }
            (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
                .iter()
                .zip(y)
                .enumerate()
                .find_map(|(i, (va, vb))| walk(va, vb, &format!("{path}[{i}]"))),
            _ if a == b => None,
            _ => Some(format!("{path} ({a} vs {b})")),
        }
    }
    let a = serde_json::to_value(a).ok()?;
    let b = serde_json::to_value(b).ok()?;
    walk(&a, &b, "")
}
