use std::collections::BTreeSet;

use rand::Rng;
use voxc_grad::{Graph, Var};

use super::MaskConfig;
use crate::error::{Error, Result};

/// Sampled span starts and the resulting masked frames of one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    frames: usize,
    starts: BTreeSet<usize>,
    masked: BTreeSet<usize>,
}

impl MaskPlan {
    /// Expands each start into the span `[t, min(t + span, frames))`.
    pub fn from_starts(frames: usize, starts: &[usize], span: usize) -> Result<Self> {
        let mut s = BTreeSet::new();
        let mut masked = BTreeSet::new();
        for &t in starts {
            if t >= frames {
                return Err(Error::Config(format!(
                    "mask start {t} outside 0..{frames}"
                )));
            }
            s.insert(t);
            masked.extend(t..(t + span).min(frames));
        }
        Ok(Self {
            frames,
            starts: s,
            masked,
        })
    }

    /// Plan with nothing masked.
    pub fn empty(frames: usize) -> Self {
        Self {
            frames,
            starts: BTreeSet::new(),
            masked: BTreeSet::new(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn starts(&self) -> &BTreeSet<usize> {
        &self.starts
    }

    pub fn masked(&self) -> &BTreeSet<usize> {
        &self.masked
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.masked.contains(&t)
    }

    /// Per-frame flags, `true` where masked.
    pub fn flags(&self) -> Vec<bool> {
        (0..self.frames).map(|t| self.masked.contains(&t)).collect()
    }
}

/// Draws `max(1, round(p * frames))` starts without replacement.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, cfg: &MaskConfig, rng: &mut R) -> MaskPlan {
    let n = ((cfg.p * frames as f64).round() as usize).max(1);
    sample_mask_with(frames, n, cfg.span, rng)
}

/// Draws exactly `n_starts` starts (capped at `frames`) without replacement.
pub fn sample_mask_with<R: Rng + ?Sized>(
    frames: usize,
    n_starts: usize,
    span: usize,
    rng: &mut R,
) -> MaskPlan {
    if frames == 0 || n_starts == 0 {
        return MaskPlan::empty(frames);
    }
    let starts = rand::seq::index::sample(rng, frames, n_starts.min(frames)).into_vec();
    MaskPlan::from_starts(frames, &starts, span).expect("starts drawn below frames")
}

/// Replaces masked rows of `z` with the shared `embedding`; `z` itself is
/// left untouched for the quantizer.
pub fn apply_mask(g: &mut Graph, z: Var, plan: &MaskPlan, embedding: Var) -> Result<Var> {
    let t = g.shape(z)?[0];
    if t != plan.frames {
        return Err(Error::Config(format!(
            "mask plan covers {} frames, input has {t}",
            plan.frames
        )));
    }
    if plan.masked.is_empty() {
        return Ok(z);
    }
    Ok(g.replace_rows(z, &plan.flags(), embedding)?)
}
