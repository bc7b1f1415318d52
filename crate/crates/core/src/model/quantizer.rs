use rand::Rng;
use voxc_grad::{Graph, ParamBinder, Tensor, Var};

use super::QuantizerConfig;
use crate::error::Result;

/// Output of [`quantize`].
pub struct Quantized {
    /// `T x dim` quantized vectors (concatenated group codewords).
    pub q: Var,
    /// `T x (G * V)` noise-free softmax probabilities; columns
    /// `g*V..(g+1)*V` belong to group `g`.
    pub probs: Var,
    /// Per-group `exp(entropy)` of the time-averaged probabilities.
    pub perplexity: Vec<f64>,
}

/// Standard Gumbel samples `-ln(-ln u)` for a `rows x cols` matrix.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::matrix(rows, cols, data).expect("non-empty noise")
}

/// Product quantization of `z` (`T x d_enc`) with Gumbel-softmax selection.
///
/// Per group, logits come from a shared linear map of `z`; the selection
/// weights are `softmax((logits + noise) / tau)`. With `hard`, the forward
/// value is the argmax one-hot while gradients flow through the soft
/// weights (straight-through). `noise = None` disables Gumbel noise.
pub fn quantize(
    cfg: &QuantizerConfig,
    g: &mut Graph,
    b: &mut ParamBinder,
    z: Var,
    tau: f64,
    noise: Option<&Tensor>,
    hard: bool,
) -> Result<Quantized> {
    let logits = super::linear(g, b, "quantizer.proj", z)?;
    let t_len = g.shape(logits)?[0];
    let v = cfg.entries;

    let mut q_parts = Vec::with_capacity(cfg.groups);
    let mut p_parts = Vec::with_capacity(cfg.groups);
    let mut perplexity = Vec::with_capacity(cfg.groups);
    for grp in 0..cfg.groups {
        let lg = g.slice_cols(logits, grp * v, v)?;

        let probs = g.softmax_rows(lg)?;
        perplexity.push(perplexity_of(g.value(probs)?, v));
        p_parts.push(probs);

        let noisy = match noise {
            Some(n) => {
                let cols: Vec<f64> = (0..t_len)
                    .flat_map(|r| n.row(r)[grp * v..(grp + 1) * v].to_vec())
                    .collect();
                let nv = g.constant(Tensor::matrix(t_len, v, cols)?);
                g.add(lg, nv)?
            }
            None => lg,
        };
        let scaled = g.scale(noisy, 1.0 / tau)?;
        let soft = g.softmax_rows(scaled)?;
        let weights = if hard {
            let sv = g.value(soft)?;
            let mut shift = vec![0.0; t_len * v];
            for r in 0..t_len {
                let row = sv.row(r);
                let k = argmax(row);
                for c in 0..v {
                    shift[r * v + c] = f64::from(u8::from(c == k)) - row[c];
                }
            }
            let shift = g.constant(Tensor::matrix(t_len, v, shift)?);
            g.add(soft, shift)?
        } else {
            soft
        };
        let book = b.get(g, &format!("quantizer.codebook{grp}"))?;
        q_parts.push(g.matmul(weights, book)?);
    }
    let q = if q_parts.len() == 1 {
        q_parts[0]
    } else {
        g.concat_cols(&q_parts)?
    };
    let probs = if p_parts.len() == 1 {
        p_parts[0]
    } else {
        g.concat_cols(&p_parts)?
    };
    Ok(Quantized {
        q,
        probs,
        perplexity,
    })
}

/// First index of the maximum.
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn perplexity_of(probs: &Tensor, v: usize) -> f64 {
    let rows = probs.len() / v;
    let mut avg = vec![0.0; v];
    for r in 0..rows {
        for (a, p) in avg.iter_mut().zip(probs.row(r)) {
            *a += p / rows as f64;
        }
    }
    let h: f64 = avg.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
    h.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use voxc_grad::ParamStore;

    fn setup(logits_bias: [f64; 4]) -> (QuantizerConfig, ParamStore) {
        let cfg = QuantizerConfig {
            groups: 2,
            entries: 4,
            dim: 4,
            ..Default::default()
        };
        let mut p = ParamStore::new();
        p.insert("quantizer.proj.weight", Tensor::zeros(&[3, 8]));
        let mut bias = vec![0.0; 8];
        bias[..4].copy_from_slice(&logits_bias);
        bias[4..].copy_from_slice(&logits_bias);
        p.insert("quantizer.proj.bias", Tensor::vector(bias).unwrap());
        let book = |off: f64| {
            Tensor::matrix(4, 2, (0..8).map(|i| off + i as f64).collect()).unwrap()
        };
        p.insert("quantizer.codebook0", book(0.0));
        p.insert("quantizer.codebook1", book(100.0));
        (cfg, p)
    }

    #[test]
    fn hard_selection_picks_argmax_codewords() {
        let (cfg, p) = setup([0.1, 0.5, 2.0, -1.0]);
        let mut g = Graph::new();
        let mut b = ParamBinder::new(&p);
        let z = g.constant(Tensor::matrix(2, 3, vec![0.3; 6]).unwrap());
        let out = quantize(&cfg, &mut g, &mut b, z, cfg.tau_floor, None, true).unwrap();
        let q = g.value(out.q).unwrap();
        for r in 0..2 {
            assert_eq!(q.row(r), &[4.0, 5.0, 104.0, 105.0]);
        }
        let probs = g.value(out.probs).unwrap();
        for r in 0..2 {
            let row = probs.row(r);
            assert!((row[..4].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((row[4..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for &px in &out.perplexity {
            assert!((1.0..=4.0).contains(&px));
        }
    }

    #[test]
    fn uniform_logits_have_full_perplexity() {
        let (cfg, p) = setup([0.0; 4]);
        let mut g = Graph::new();
        let mut b = ParamBinder::new(&p);
        let z = g.constant(Tensor::matrix(3, 3, vec![1.0; 9]).unwrap());
        let out = quantize(&cfg, &mut g, &mut b, z, 1.0, None, false).unwrap();
        for &px in &out.perplexity {
            assert!((px - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_noise_is_finite() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = gumbel_noise(&mut rng, 50, 8);
        assert!(n.all_finite());
    }
}
