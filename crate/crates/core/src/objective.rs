//! Masked contrastive pretraining loss and codebook diversity penalty.

use rand::Rng;
use serde::{Deserialize, Serialize};
use voxc_grad::{Graph, ParamBinder, Var};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::model::{self, apply_mask, contextualize, gumbel_noise, quantize, sample_mask, MaskPlan, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Distractors per masked step (K).
    pub distractors: usize,
    /// Cosine-similarity temperature (kappa).
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            distractors: 10,
            temperature: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainLossConfig {
    pub contrastive: ContrastiveConfig,
    /// Weight of the diversity term (alpha).
    pub diversity_weight: f64,
}

impl Default for PretrainLossConfig {
    fn default() -> Self {
        Self {
            contrastive: ContrastiveConfig::default(),
            diversity_weight: 0.1,
        }
    }
}

impl PretrainLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrastive.temperature > 0.0) {
            return Err(Error::Config("contrastive temperature must be positive".into()));
        }
        if !(self.diversity_weight >= 0.0) {
            return Err(Error::Config("diversity weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// `k` indices drawn uniformly with replacement from `plan.masked() \ {t}`.
pub fn sample_distractors<R: Rng + ?Sized>(
    plan: &MaskPlan,
    t: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !plan.is_masked(t) {
        return Err(Error::Objective(format!("step {t} is not masked")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let support: Vec<usize> = plan.masked().iter().copied().filter(|&i| i != t).collect();
    if support.is_empty() {
        return Err(Error::Objective(format!(
            "no other masked step to draw distractors for step {t}"
        )));
    }
    Ok((0..k)
        .map(|_| support[rng.gen_range(0..support.len())])
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Objective(format!(
            "vector dims differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Objective("zero-norm vector has no cosine".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Negative log-probability of `q` among `q` and `distractors` under
/// `softmax(cos(c, .) / temperature)`.
pub fn contrastive_loss(
    c: &[f64],
    q: &[f64],
    distractors: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Objective("temperature must be positive".into()));
    }
    let pos = cosine(c, q)? / temperature;
    let mut logits = vec![pos];
    for d in distractors {
        logits.push(cosine(c, d)? / temperature);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    Ok((lse - pos).max(0.0))
}

/// `(G*V - sum_g exp(H_g)) / (G*V)` for per-group averaged distributions.
pub fn diversity_loss(avg_probs: &[Vec<f64>]) -> Result<f64> {
    if avg_probs.is_empty() || avg_probs[0].is_empty() {
        return Err(Error::Objective("diversity loss needs at least one group".into()));
    }
    let v = avg_probs[0].len();
    let mut perplexity = 0.0;
    for (g, row) in avg_probs.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != v || row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Objective(format!("group {g} is not a distribution")));
        }
        perplexity += row_perplexity(row);
    }
    let total = (avg_probs.len() * v) as f64;
    Ok((total - perplexity) / total)
}

/// `exp(H)` of one distribution, evaluated as `exp(H)` near the one-hot end and
/// as `V * exp(-KL(p || uniform))` near the uniform end so both endpoints come
/// out exact; clamped to the attainable range `[1, V]`.
fn row_perplexity(row: &[f64]) -> f64 {
    let v = row.len() as f64;
    let support = || row.iter().filter(|&&p| p > 0.0);
    let h: f64 = support().map(|p| -p * p.ln()).sum();
    let ppl = if h < 0.5 * v.ln() {
        h.exp()
    } else {
        let kl: f64 = support().map(|p| p * (p * v).ln()).sum();
        v * (-kl).exp()
    };
    ppl.clamp(1.0, v)
}

/// Loss node and scalar metrics from [`pretrain_loss`].
pub struct PretrainOutput {
    pub loss: Var,
    pub contrastive: f64,
    pub diversity: f64,
    /// Per-group perplexity of the batch-averaged codeword probabilities.
    pub perplexity: Vec<f64>,
    pub masked_steps: usize,
}

/// Mask plan with at least two masked frames, resampling if a draw falls short.
pub fn pretrain_mask<R: Rng + ?Sized>(
    frames: usize,
    cfg: &model::MaskConfig,
    rng: &mut R,
) -> Result<MaskPlan> {
    if frames < 2 {
        return Err(Error::Objective(format!(
            "{frames} frame(s) cannot hold two masked steps"
        )));
    }
    for _ in 0..1000 {
        let plan = sample_mask(frames, cfg, rng);
        if plan.masked().len() >= 2 {
            return Ok(plan);
        }
    }
    Err(Error::Objective(format!(
        "mask config never masks two of {frames} frames"
    )))
}

/// Row-wise L2 normalization on the graph.
fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.mul(x, x)?;
    let ss = g.sum_axis(sq, 1)?;
    let inv = g.pow(ss, -0.5)?;
    Ok(g.scale_rows(x, inv)?)
}

/// Batch pretraining loss: mean contrastive term over every masked step of
/// every utterance plus the weighted diversity term over batch-averaged
/// codeword probabilities.
///
/// Randomness is drawn per utterance in batch order: mask, Gumbel noise,
/// then distractors.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss<R: Rng + ?Sized>(
    model: &Model,
    g: &mut Graph,
    b: &mut ParamBinder,
    batch: &[Waveform],
    cfg: &PretrainLossConfig,
    tau: f64,
    hard: bool,
    rng: &mut R,
) -> Result<PretrainOutput> {
    if batch.is_empty() {
        return Err(Error::Objective("empty batch".into()));
    }
    let mc = &model.config;
    let (groups, entries) = (mc.quantizer.groups, mc.quantizer.entries);
    let kappa = cfg.contrastive.temperature;

    let mut contrastive_parts = Vec::with_capacity(batch.len());
    let mut prob_parts = Vec::with_capacity(batch.len());
    let mut steps = 0;
    let mut frames = 0;
    for wave in batch {
        let z = model.encode_wave(g, b, wave)?;
        let t_len = g.shape(z)?[0];
        let plan = pretrain_mask(t_len, &mc.mask, rng)?;
        let noise = gumbel_noise(rng, t_len, groups * entries);
        let quant = quantize(&mc.quantizer, g, b, z, tau, Some(&noise), hard)?;

        let emb = b.get(g, "mask_embedding")?;
        let zm = apply_mask(g, z, &plan, emb)?;
        let c = contextualize(&mc.context, g, b, zm)?;
        let cp = model::linear(g, b, "final_proj", c)?;

        let masked: Vec<usize> = plan.masked().iter().copied().collect();
        let mut cands = Vec::with_capacity(masked.len());
        for &t in &masked {
            let mut row = vec![t];
            row.extend(sample_distractors(&plan, t, cfg.contrastive.distractors, rng)?);
            cands.push(row);
        }

        let cn = normalize_rows(g, cp)?;
        let qn = normalize_rows(g, quant.q)?;
        let cm = g.gather_rows(cn, &masked)?;
        let qt = g.transpose(qn)?;
        let sim = g.matmul(cm, qt)?;
        let sim = g.scale(sim, 1.0 / kappa)?;
        let picked = g.gather_per_row(sim, &cands)?;
        let logp = g.log_softmax_rows(picked)?;
        let first = g.gather_per_row(logp, &vec![vec![0]; masked.len()])?;
        let s = g.sum_all(first)?;
        contrastive_parts.push(s);
        prob_parts.push(g.sum_axis(quant.probs, 0)?);
        steps += masked.len();
        frames += t_len;
    }

    let mut csum = contrastive_parts[0];
    for &p in &contrastive_parts[1..] {
        csum = g.add(csum, p)?;
    }
    let contrastive = g.scale(csum, -1.0 / steps as f64)?;

    let mut psum = prob_parts[0];
    for &p in &prob_parts[1..] {
        psum = g.add(psum, p)?;
    }
    let avg = g.scale(psum, 1.0 / frames as f64)?;
    let avg = g.reshape(avg, vec![1, groups * entries])?;
    let mut perp_sum = None;
    let mut perplexity = Vec::with_capacity(groups);
    for grp in 0..groups {
        let p = g.slice_cols(avg, grp * entries, entries)?;
        let lp = g.log(p)?;
        let plp = g.mul(p, lp)?;
        let neg_h = g.sum_all(plp)?;
        let h = g.neg(neg_h)?;
        let perp = g.exp(h)?;
        perplexity.push(g.value(perp)?.data()[0]);
        perp_sum = Some(match perp_sum {
            None => perp,
            Some(acc) => g.add(acc, perp)?,
        });
    }
    let total = (groups * entries) as f64;
    let scaled = g.scale(perp_sum.expect("groups >= 1"), -1.0 / total)?;
    let diversity = g.add_scalar(scaled, 1.0)?;

    let weighted = g.scale(diversity, cfg.diversity_weight)?;
    let loss = g.add(contrastive, weighted)?;
    Ok(PretrainOutput {
        loss,
        contrastive: g.value(contrastive)?.data()[0],
        diversity: g.value(diversity)?.data()[0],
        perplexity,
        masked_steps: steps,
    })
}
