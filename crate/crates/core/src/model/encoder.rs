use voxc_grad::{Graph, ParamBinder, Tensor, Var};

use super::EncoderConfig;
use crate::error::{Error, Result};

/// Smallest input length that yields one output frame.
pub fn receptive_field(cfg: &EncoderConfig) -> usize {
    cfg.layers
        .iter()
        .rev()
        .fold(1, |len, l| l.kernel + (len - 1) * l.stride)
}

/// Frames produced for `n_samples` inputs: each layer maps `L` to
/// `(L - k) / s + 1`.
pub fn frame_count(cfg: &EncoderConfig, n_samples: usize) -> Result<usize> {
    let needed = receptive_field(cfg);
    if n_samples < needed {
        return Err(Error::TooShort {
            samples: n_samples,
            needed,
        });
    }
    Ok(cfg
        .layers
        .iter()
        .fold(n_samples, |len, l| (len - l.kernel) / l.stride + 1))
}

/// Conv -> layer norm over channels per frame -> GELU, for every layer.
/// Returns `T x d_enc`.
pub fn encode(
    cfg: &EncoderConfig,
    g: &mut Graph,
    b: &mut ParamBinder,
    samples: &[f64],
) -> Result<Var> {
    frame_count(cfg, samples.len())?;
    let input = Tensor::matrix(1, samples.len(), samples.to_vec())?;
    let mut x = g.constant(input);
    let n = cfg.layers.len();
    for (i, l) in cfg.layers.iter().enumerate() {
        let w = b.get(g, &format!("encoder.conv{i}.weight"))?;
        let bias = b.get(g, &format!("encoder.conv{i}.bias"))?;
        let y = g.conv1d(x, w, bias, l.stride)?;
        let frames = g.transpose(y)?;
        let normed = super::norm(g, b, &format!("encoder.norm{i}"), frames)?;
        let act = g.gelu(normed)?;
        x = if i + 1 == n { act } else { g.transpose(act)? };
    }
    Ok(x)
}
