//! Connectionist temporal classification: loss, gradient, greedy decoding
//! and a brute-force path-enumeration oracle. Label 0 is the blank.

use voxc_grad::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::vocab::CharVocab;

const BLANK: usize = CharVocab::BLANK;

/// `ln(e^a + e^b)` tolerating `-inf` operands.
fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_inputs(logp: &Tensor, target: &[usize]) -> Result<(usize, usize)> {
    let (t, n) = logp.dims2().ok_or_else(|| {
        Error::Objective(format!("CTC expects T x labels log-probs, got {:?}", logp.shape()))
    })?;
    if let Some(&bad) = target.iter().find(|&&l| l == BLANK || l >= n) {
        return Err(Error::Objective(format!(
            "target label {bad} invalid for {n} labels with blank 0"
        )));
    }
    Ok((t, n))
}

/// Blank-interleaved target `[blank, l1, blank, l2, ..., blank]`.
fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK);
    for &l in target {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Whether state `s` may be entered from `s - 2` (skipping a blank).
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Forward variables `alpha[t][s]` in log space.
fn forward(logp: &Tensor, ext: &[usize]) -> Vec<Vec<f64>> {
    let (t_len, _) = logp.dims2().expect("checked");
    let s_len = ext.len();
    let mut alpha = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    alpha[0][0] = logp.row(0)[ext[0]];
    if s_len > 1 {
        alpha[0][1] = logp.row(0)[ext[1]];
    }
    for t in 1..t_len {
        let row = logp.row(t);
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = lse(a, alpha[t - 1][s - 1]);
            }
            if can_skip(ext, s) {
                a = lse(a, alpha[t - 1][s - 2]);
            }
            if a > f64::NEG_INFINITY {
                alpha[t][s] = a + row[ext[s]];
            }
        }
    }
    alpha
}

/// Backward variables `beta[t][s]`: log-probability of the remaining frames
/// after `t` given state `s` at `t` (emission at `t` excluded).
fn backward(logp: &Tensor, ext: &[usize]) -> Vec<Vec<f64>> {
    let (t_len, _) = logp.dims2().expect("checked");
    let s_len = ext.len();
    let mut beta = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        let next = logp.row(t + 1);
        for s in 0..s_len {
            let mut acc = beta[t + 1][s] + next[ext[s]];
            if s + 1 < s_len {
                acc = lse(acc, beta[t + 1][s + 1] + next[ext[s + 1]]);
            }
            if s + 2 < s_len && can_skip(ext, s + 2) {
                acc = lse(acc, beta[t + 1][s + 2] + next[ext[s + 2]]);
            }
            beta[t][s] = acc;
        }
    }
    beta
}

fn total(alpha: &[Vec<f64>]) -> f64 {
    let last = alpha.last().expect("T >= 1");
    let s = last.len();
    if s > 1 {
        lse(last[s - 1], last[s - 2])
    } else {
        last[0]
    }
}

/// Negative log-likelihood of `target` (labels, no blanks) under the
/// per-frame log-probabilities `logp` (`T x labels`). Unreachable targets
/// give `+inf`.
pub fn ctc_loss(logp: &Tensor, target: &[usize]) -> Result<f64> {
    check_inputs(logp, target)?;
    let ext = extended(target);
    Ok(-total(&forward(logp, &ext)))
}

/// Loss and its gradient with respect to every entry of `logp`, which is
/// minus the posterior probability that frame `t` emits label `k`.
/// Returns `None` for an unreachable target.
pub fn ctc_loss_and_grad(logp: &Tensor, target: &[usize]) -> Result<Option<(f64, Vec<f64>)>> {
    let (t_len, n) = check_inputs(logp, target)?;
    let ext = extended(target);
    let alpha = forward(logp, &ext);
    let log_p = total(&alpha);
    if log_p == f64::NEG_INFINITY {
        return Ok(None);
    }
    let beta = backward(logp, &ext);
    let mut grad = vec![0.0; t_len * n];
    for t in 0..t_len {
        for (s, &l) in ext.iter().enumerate() {
            let joint = alpha[t][s] + beta[t][s];
            if joint > f64::NEG_INFINITY {
                grad[t * n + l] -= (joint - log_p).exp();
            }
        }
    }
    Ok(Some((-log_p, grad)))
}

/// CTC loss as a graph node over `logp`. Unreachable targets are an error
/// here since they have no gradient.
pub fn ctc_loss_node(g: &mut Graph, logp: Var, target: &[usize]) -> Result<Var> {
    let value = g.value(logp)?;
    match ctc_loss_and_grad(value, target)? {
        Some((loss, grad)) => Ok(g.custom_scalar("ctc_loss", logp, loss, grad)?),
        None => Err(Error::Objective(format!(
            "target of {} labels cannot be aligned to {} frames",
            target.len(),
            value.shape()[0]
        ))),
    }
}

/// Best-path labels: per-frame argmax, repeats collapsed, blanks removed.
pub fn ctc_greedy_labels(logp: &Tensor) -> Vec<usize> {
    let Some((t_len, _)) = logp.dims2() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut prev = BLANK;
    for t in 0..t_len {
        let k = crate::model::argmax(logp.row(t));
        if k != BLANK && k != prev {
            out.push(k);
        }
        prev = k;
    }
    out
}

/// Best-path transcript.
pub fn ctc_greedy(logp: &Tensor, vocab: &CharVocab) -> String {
    vocab.decode(&ctc_greedy_labels(logp))
}

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Largest frame count [`ctc_oracle`] accepts.
pub const ORACLE_MAX_FRAMES: usize = 8;
/// Largest label count (blank included) [`ctc_oracle`] accepts.
pub const ORACLE_MAX_LABELS: usize = 4;

/// Negative log of the summed probability of every length-`T` path that
/// collapses to `target`, by exhaustive enumeration of `probs`
/// (`T x labels`, plain probabilities).
pub fn ctc_oracle(probs: &Tensor, target: &[usize]) -> Result<f64> {
    let (t_len, n) = check_inputs(probs, target)?;
    if t_len > ORACLE_MAX_FRAMES || n > ORACLE_MAX_LABELS {
        return Err(Error::Objective(format!(
            "oracle limited to T <= {ORACLE_MAX_FRAMES} and {ORACLE_MAX_LABELS} labels, got {t_len} x {n}"
        )));
    }
    let mut path = vec![0; t_len];
    let mut mass = 0.0;
    loop {
        if collapse(&path) == target {
            mass += (0..t_len).map(|t| probs.row(t)[path[t]]).product::<f64>();
        }
        let mut i = 0;
        loop {
            if i == t_len {
                return Ok(-mass.ln());
            }
            path[i] += 1;
            if path[i] < n {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_rows(rows: &[Vec<f64>]) -> Tensor {
        let logs: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        Tensor::from_rows(&logs).unwrap()
    }

    #[test]
    fn single_frame() {
        let lp = log_rows(&[vec![0.4, 0.6]]);
        assert!((ctc_loss(&lp, &[1]).unwrap() - 0.510826).abs() < 1e-6);
    }

    #[test]
    fn two_frames_three_paths() {
        let lp = log_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!((ctc_loss(&lp, &[1]).unwrap() - 0.287682).abs() < 1e-6);
        assert_eq!(ctc_loss(&lp, &[1, 1]).unwrap(), f64::INFINITY);
        assert!(ctc_loss_and_grad(&lp, &[1, 1]).unwrap().is_none());
        let probs = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert!((ctc_oracle(&probs, &[1]).unwrap() - 0.75f64.ln().abs()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let rows = vec![vec![0.3, 0.7], vec![0.9, 0.1], vec![0.5, 0.5]];
        let expect = -(0.3f64 * 0.9 * 0.5).ln();
        assert!((ctc_loss(&log_rows(&rows), &[]).unwrap() - expect).abs() < 1e-12);
        let probs = Tensor::from_rows(&rows).unwrap();
        assert!((ctc_oracle(&probs, &[]).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn greedy_collapse() {
        let (a, b) = (1, 2);
        let path = [a, a, BLANK, a, b, b];
        let rows: Vec<Vec<f64>> = path
            .iter()
            .map(|&k| (0..3).map(|j| if j == k { 0.0 } else { -5.0 }).collect())
            .collect();
        let lp = Tensor::from_rows(&rows).unwrap();
        assert_eq!(ctc_greedy_labels(&lp), vec![a, a, b]);
        assert_eq!(collapse(&[a, BLANK, a]), vec![a, a]);
        assert_eq!(collapse(&[BLANK, BLANK]), Vec::<usize>::new());
        let vocab = CharVocab::new("ab".chars()).unwrap();
        assert_eq!(ctc_greedy(&lp, &vocab), "aab");
    }

    #[test]
    fn rejects_bad_targets() {
        let lp = log_rows(&[vec![0.5, 0.5]]);
        assert!(ctc_loss(&lp, &[0]).is_err());
        assert!(ctc_loss(&lp, &[2]).is_err());
        let big = Tensor::full(&[9, 2], 0.5);
        assert!(ctc_oracle(&big, &[1]).is_err());
    }
}
