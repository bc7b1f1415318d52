//! Feature encoder, product quantizer, context network, span masking and
//! utterance embeddings.

mod context;
mod embedding;
mod encoder;
mod mask;
mod quantizer;

pub use context::contextualize;
pub use embedding::{utterance_embedding, Embedding};
pub use encoder::{encode, frame_count, receptive_field};
pub use mask::{apply_mask, sample_mask, sample_mask_with, MaskPlan};
pub use quantizer::{gumbel_noise, quantize, Quantized};
pub(crate) use quantizer::argmax;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use voxc_grad::{Graph, ParamBinder, ParamStore, Tensor, Var};

use crate::audio::{normalize_wave, Waveform};
use crate::error::{Error, Result};

/// Epsilon of every layer norm in the model.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: Vec<ConvLayer>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let layers = [(10, 5), (3, 2), (3, 2), (3, 2), (2, 2)]
            .into_iter()
            .map(|(kernel, stride)| ConvLayer {
                out_channels: 64,
                kernel,
                stride,
            })
            .collect();
        Self { layers }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride < 1 || l.kernel < l.stride || l.out_channels == 0 {
                return Err(Error::Config(format!(
                    "encoder layer {i}: need kernel >= stride >= 1 and channels > 0, got {l:?}"
                )));
            }
        }
        Ok(())
    }

    /// Output dimension of the last layer.
    pub fn dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    /// Codebook groups (G).
    pub groups: usize,
    /// Entries per group (V).
    pub entries: usize,
    /// Width of the concatenated quantized vector; each group contributes
    /// `dim / groups`.
    pub dim: usize,
    pub tau_start: f64,
    pub tau_floor: f64,
    pub tau_decay: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            groups: 2,
            entries: 8,
            dim: 64,
            tau_start: 2.0,
            tau_floor: 0.5,
            tau_decay: 0.999,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups < 1 || self.entries < 2 {
            return Err(Error::Config("quantizer needs groups >= 1 and entries >= 2".into()));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "quantizer dim {} not divisible by groups {}",
                self.dim, self.groups
            )));
        }
        if !(self.tau_start >= self.tau_floor && self.tau_floor > 0.0) {
            return Err(Error::Config("need tau_start >= tau_floor > 0".into()));
        }
        if !(self.tau_decay > 0.0 && self.tau_decay <= 1.0) {
            return Err(Error::Config("need 0 < tau_decay <= 1".into()));
        }
        Ok(())
    }

    /// Gumbel temperature after `step` multiplicative decays.
    pub fn tau_at(&self, step: usize) -> f64 {
        (self.tau_start * self.tau_decay.powi(step as i32)).max(self.tau_floor)
    }

    /// Number of distinct quantized vectors, `V^G`.
    pub fn capacity(&self) -> u128 {
        (self.entries as u128).pow(self.groups as u32)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// Kernel of the convolutional positional embedding; 0 disables it.
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            pos_conv_kernel: 9,
            pos_conv_groups: 4,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.pos_conv_kernel > 0
            && (self.pos_conv_groups == 0 || !self.d_model.is_multiple_of(self.pos_conv_groups))
        {
            return Err(Error::Config(format!(
                "d_model {} not divisible by pos_conv_groups {}",
                self.d_model, self.pos_conv_groups
            )));
        }
        if self.ffn_dim == 0 {
            return Err(Error::Config("ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    /// Proportion of frames drawn as span starts.
    pub p: f64,
    /// Span length in frames.
    pub span: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self { p: 0.065, span: 10 }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) || self.span < 1 {
            return Err(Error::Config(format!(
                "mask needs 0 <= p <= 1 and span >= 1, got p={} span={}",
                self.p, self.span
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub quantizer: QuantizerConfig,
    pub context: ContextConfig,
    pub mask: MaskConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.quantizer.validate()?;
        self.context.validate()?;
        self.mask.validate()
    }
}

/// Name of the fine-tuning output layer's weight.
pub const CTC_HEAD_WEIGHT: &str = "ctc_head.weight";
pub const CTC_HEAD_BIAS: &str = "ctc_head.bias";

/// Configuration plus every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("non-zero extents")
    }

    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let dist = Uniform::new(lo, hi);
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("non-zero extents")
    }

    /// `fan_in x fan_out` weight plus zero bias.
    fn linear(&mut self, p: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) {
        p.insert(
            format!("{name}.weight"),
            self.normal(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
        );
        p.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }

    fn norm(&mut self, p: &mut ParamStore, name: &str, dim: usize) {
        p.insert(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        p.insert(format!("{name}.beta"), Tensor::zeros(&[dim]));
    }
}

impl Model {
    /// Randomly initialized model; identical seeds give identical parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut p = ParamStore::new();

        let mut c_in = 1;
        for (i, l) in config.encoder.layers.iter().enumerate() {
            let fan_in = c_in * l.kernel;
            p.insert(
                format!("encoder.conv{i}.weight"),
                init.normal(&[l.out_channels, c_in, l.kernel], (2.0 / fan_in as f64).sqrt()),
            );
            p.insert(format!("encoder.conv{i}.bias"), Tensor::zeros(&[l.out_channels]));
            init.norm(&mut p, &format!("encoder.norm{i}"), l.out_channels);
            c_in = l.out_channels;
        }
        let d_enc = config.encoder.dim();
        p.insert("mask_embedding", init.uniform(&[d_enc], 0.0, 1.0));

        let q = &config.quantizer;
        init.linear(&mut p, "quantizer.proj", d_enc, q.groups * q.entries);
        for g in 0..q.groups {
            p.insert(
                format!("quantizer.codebook{g}"),
                init.uniform(&[q.entries, q.dim / q.groups], -1.0, 1.0),
            );
        }

        let c = &config.context;
        let d = c.d_model;
        init.linear(&mut p, "context.in_proj", d_enc, d);
        if c.pos_conv_kernel > 0 {
            let per_group = d / c.pos_conv_groups;
            let fan_in = per_group * c.pos_conv_kernel;
            p.insert(
                "context.pos_conv.weight",
                init.normal(&[d, per_group, c.pos_conv_kernel], 1.0 / (fan_in as f64).sqrt()),
            );
            p.insert("context.pos_conv.bias", Tensor::zeros(&[d]));
            init.norm(&mut p, "context.pos_norm", d);
        }
        for l in 0..c.n_layers {
            let pre = format!("context.layer{l}");
            init.norm(&mut p, &format!("{pre}.attn_norm"), d);
            for proj in ["q", "k", "v", "o"] {
                init.linear(&mut p, &format!("{pre}.attn.{proj}"), d, d);
            }
            init.norm(&mut p, &format!("{pre}.ffn_norm"), d);
            init.linear(&mut p, &format!("{pre}.ffn.up"), d, c.ffn_dim);
            init.linear(&mut p, &format!("{pre}.ffn.down"), c.ffn_dim, d);
        }
        init.norm(&mut p, "context.final_norm", d);
        init.linear(&mut p, "final_proj", d, q.dim);

        Ok(Self { config, params: p })
    }

    /// Adds the randomly initialized `d_model x n_labels` character head.
    pub fn add_ctc_head(&mut self, n_labels: usize, seed: u64) {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = self.config.context.d_model;
        init.linear(&mut self.params, "ctc_head", d, n_labels);
    }

    pub fn has_ctc_head(&self) -> bool {
        self.params.contains(CTC_HEAD_WEIGHT)
    }

    /// Width of the CTC head output, if present.
    pub fn ctc_labels(&self) -> Option<usize> {
        self.params.get(CTC_HEAD_WEIGHT).ok().map(|t| t.shape()[1])
    }

    /// Binder over the parameters with nothing frozen.
    pub fn binder(&self) -> ParamBinder<'_> {
        ParamBinder::new(&self.params)
    }

    /// Binder treating every parameter as a constant.
    pub fn frozen_binder(&self) -> ParamBinder<'_> {
        ParamBinder::new(&self.params).freeze_prefix("")
    }

    /// Normalizes the waveform and runs the encoder on a graph.
    pub fn encode_wave(&self, g: &mut Graph, b: &mut ParamBinder, w: &Waveform) -> Result<Var> {
        let norm = normalize_wave(w);
        encode(&self.config.encoder, g, b, norm.wave.samples())
    }

    /// Context network output for unmasked input (inference).
    pub fn context(&self, w: &Waveform) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = self.frozen_binder();
        let z = self.encode_wave(&mut g, &mut b, w)?;
        let c = contextualize(&self.config.context, &mut g, &mut b, z)?;
        Ok(g.value(c)?.clone())
    }

    /// Speaker embedding of an utterance.
    pub fn embed(&self, w: &Waveform) -> Result<Embedding> {
        utterance_embedding(&self.context(w)?)
    }

    /// Row-wise CTC log-probabilities, given encoder output on the graph.
    pub fn ctc_head(&self, g: &mut Graph, b: &mut ParamBinder, z: Var) -> Result<Var> {
        if !self.has_ctc_head() {
            return Err(Error::Config("model has no CTC head; run fine-tuning first".into()));
        }
        let c = contextualize(&self.config.context, g, b, z)?;
        let w = b.get(g, CTC_HEAD_WEIGHT)?;
        let bias = b.get(g, CTC_HEAD_BIAS)?;
        let logits = g.matmul(c, w)?;
        let logits = g.add_row(logits, bias)?;
        Ok(g.log_softmax_rows(logits)?)
    }

    /// `T x n_labels` log-probabilities for a waveform.
    pub fn ctc_log_probs(&self, w: &Waveform) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = self.frozen_binder();
        let z = self.encode_wave(&mut g, &mut b, w)?;
        let lp = self.ctc_head(&mut g, &mut b, z)?;
        Ok(g.value(lp)?.clone())
    }
}

/// Linear layer `x W + b` with parameters `{name}.weight` / `{name}.bias`.
pub(crate) fn linear(g: &mut Graph, b: &mut ParamBinder, name: &str, x: Var) -> Result<Var> {
    let w = b.get(g, &format!("{name}.weight"))?;
    let bias = b.get(g, &format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, bias)?)
}

pub(crate) fn norm(g: &mut Graph, b: &mut ParamBinder, name: &str, x: Var) -> Result<Var> {
    let gamma = b.get(g, &format!("{name}.gamma"))?;
    let beta = b.get(g, &format!("{name}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        assert_eq!(QuantizerConfig::default().capacity(), 64);
        let q = QuantizerConfig {
            groups: 2,
            entries: 4,
            ..Default::default()
        };
        assert_eq!(q.capacity(), 16);
    }

    #[test]
    fn tau_schedule_decays_to_floor() {
        let q = QuantizerConfig::default();
        assert_eq!(q.tau_at(0), 2.0);
        assert!((q.tau_at(1) - 1.998).abs() < 1e-12);
        assert_eq!(q.tau_at(100_000), 0.5);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ModelConfig::default();
        c.context.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.encoder.layers[0].stride = 20;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.quantizer.entries = 1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.mask.p = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::new(ModelConfig::default(), 7).unwrap();
        let b = Model::new(ModelConfig::default(), 7).unwrap();
        let c = Model::new(ModelConfig::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn ctc_head_width_counts_blank() {
        let mut m = Model::new(ModelConfig::default(), 0).unwrap();
        assert_eq!(m.ctc_labels(), None);
        m.add_ctc_head(crate::vocab::CharVocab::english().n_labels(), 1);
        assert_eq!(m.ctc_labels(), Some(29));
    }
}
