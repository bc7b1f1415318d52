use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voxc_grad::{ParamStore, Tensor};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Model, CTC_HEAD_BIAS, CTC_HEAD_WEIGHT};
use crate::vocab::CharVocab;

const MAGIC: &[u8; 4] = b"VXCP";
pub const CHECKPOINT_VERSION: u8 = 1;

/// Model parameters plus everything needed to resume or reproduce a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Full run configuration; `config.model` always equals `model.config`.
    pub config: Config,
    /// Character order of the CTC head, once fine-tuned.
    pub vocab: Option<CharVocab>,
    pub seed: u64,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: Config,
    vocab: Option<CharVocab>,
    seed: u64,
    pretrain_steps: usize,
    finetune_steps: usize,
}

impl Checkpoint {
    pub fn new(model: Model, mut config: Config, seed: u64) -> Self {
        config.model = model.config.clone();
        Self {
            model,
            config,
            vocab: None,
            seed,
            pretrain_steps: 0,
            finetune_steps: 0,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: Config {
                model: self.model.config.clone(),
                ..self.config.clone()
            },
            vocab: self.vocab.clone(),
            seed: self.seed,
            pretrain_steps: self.pretrain_steps,
            finetune_steps: self.finetune_steps,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for (name, t) in self.model.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.config.validate()?;

        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
            params.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        check_params(&header.config, &params, header.vocab.as_ref())?;
        let model = Model {
            config: header.config.model.clone(),
            params,
        };
        Ok(Self {
            model,
            config: header.config,
            vocab: header.vocab,
            seed: header.seed,
            pretrain_steps: header.pretrain_steps,
            finetune_steps: header.finetune_steps,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn fingerprint(&self) -> String {
        fingerprint_bytes(&self.to_bytes())
    }
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parameters must match the configured architecture exactly.
fn check_params(cfg: &Config, params: &ParamStore, vocab: Option<&CharVocab>) -> Result<()> {
    let mut reference = Model::new(cfg.model.clone(), 0)?;
    if params.contains(CTC_HEAD_WEIGHT) || params.contains(CTC_HEAD_BIAS) {
        let labels = match vocab {
            Some(v) => v.n_labels(),
            None => return Err(Error::Checkpoint("CTC head without a vocabulary".into())),
        };
        reference.add_ctc_head(labels, 0);
    }
    for (name, t) in reference.params.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, config implies {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = params.names().find(|n| !reference.params.contains(n)) {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
