use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::NGramLm;
use crate::error::{Error, Result};
use crate::vocab::CharVocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Weight of the word log-probability added when a word completes.
    pub lm_weight: f64,
    /// Log-domain bonus per completed word.
    pub word_bonus: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 16,
            lm_weight: 1.0,
            word_bonus: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width < 1 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if !(self.lm_weight >= 0.0) || !self.word_bonus.is_finite() {
            return Err(Error::Config(
                "lm_weight must be non-negative and word_bonus finite".into(),
            ));
        }
        Ok(())
    }
}

/// Best hypothesis and its combined acoustic plus language-model score.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy)]
struct Beam {
    /// Log-probability of paths ending in blank.
    blank: f64,
    /// Log-probability of paths ending in the prefix's last character.
    non_blank: f64,
    /// Accumulated fusion score of completed words.
    lm: f64,
}

impl Beam {
    fn empty(lm: f64) -> Self {
        Self {
            blank: f64::NEG_INFINITY,
            non_blank: f64::NEG_INFINITY,
            lm,
        }
    }

    fn acoustic(&self) -> f64 {
        lse(self.blank, self.non_blank)
    }
}

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

struct Fusion<'a> {
    lm: Option<&'a NGramLm>,
    cfg: &'a DecodeConfig,
}

impl Fusion<'_> {
    /// Score for completing the last word of `prefix`, if it has one.
    fn word_score(&self, prefix: &str) -> f64 {
        let (head, word) = match prefix.rfind(' ') {
            Some(i) => (&prefix[..i], &prefix[i + 1..]),
            None => ("", prefix),
        };
        if word.is_empty() {
            return 0.0;
        }
        let lm = match self.lm {
            Some(lm) if self.cfg.lm_weight > 0.0 => {
                let history: Vec<&str> = head.split_whitespace().collect();
                self.cfg.lm_weight * lm.prob(&history, word).ln()
            }
            _ => 0.0,
        };
        lm + self.cfg.word_bonus
    }

    /// Combined score if decoding stopped here, completing any open word.
    fn final_score(&self, prefix: &str, beam: &Beam) -> f64 {
        let pending = if prefix.ends_with(' ') {
            0.0
        } else {
            self.word_score(prefix)
        };
        beam.acoustic() + beam.lm + pending
    }
}

/// Rows of a `T x labels` tensor as slices.
pub fn frames_of(t: &voxc_grad::Tensor) -> Vec<&[f64]> {
    match t.dims2() {
        Some((rows, _)) => (0..rows).map(|r| t.row(r)).collect(),
        None => Vec::new(),
    }
}

/// CTC prefix beam search over per-frame log-probabilities (blank at label
/// 0), adding `lm_weight * ln P(word | history) + word_bonus` whenever a
/// space completes a word and once more for the final unfinished word.
///
/// Pruning alone can make a wider beam end on a worse hypothesis, so the
/// result is the best final hypothesis over the searches at every width up
/// to `beam_width` (stopping once a search prunes nothing). Equal scores are
/// broken toward the lexicographically smaller text.
pub fn beam_decode(
    frames: &[&[f64]],
    vocab: &CharVocab,
    lm: Option<&NGramLm>,
    cfg: &DecodeConfig,
) -> Result<Decoded> {
    cfg.validate()?;
    let n = vocab.n_labels();
    if let Some(bad) = frames.iter().find(|f| f.len() != n) {
        return Err(Error::Config(format!(
            "frame has {} labels, vocabulary needs {n}",
            bad.len()
        )));
    }
    let fusion = Fusion { lm, cfg };
    let mut best: Option<Decoded> = None;
    for width in 1..=cfg.beam_width {
        let (found, pruned) = search(frames, vocab, &fusion, width);
        if let Some(d) = found {
            if best.as_ref().is_none_or(|b| better(&d, b)) {
                best = Some(d);
            }
        }
        if !pruned {
            break;
        }
    }
    Ok(best.unwrap_or(Decoded {
        text: String::new(),
        score: 0.0,
    }))
}

fn better(a: &Decoded, b: &Decoded) -> bool {
    a.score > b.score || (a.score == b.score && a.text < b.text)
}

/// One prefix beam search at a fixed width. Also reports whether any
/// hypothesis was pruned.
fn search(
    frames: &[&[f64]],
    vocab: &CharVocab,
    fusion: &Fusion,
    width: usize,
) -> (Option<Decoded>, bool) {
    let space = vocab.space_label();
    let mut pruned = false;
    let mut beams: Vec<(String, Beam)> = vec![(
        String::new(),
        Beam {
            blank: 0.0,
            non_blank: f64::NEG_INFINITY,
            lm: 0.0,
        },
    )];
    for frame in frames {
        let mut next: BTreeMap<String, Beam> = BTreeMap::new();
        for (prefix, beam) in &beams {
            let total = beam.acoustic();
            let last = prefix.chars().last().and_then(|c| vocab.label(c));

            let e = next.entry(prefix.clone()).or_insert(Beam::empty(beam.lm));
            e.blank = lse(e.blank, total + frame[CharVocab::BLANK]);

            for (k, &lp) in frame.iter().enumerate().skip(1) {
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let c = vocab.char_of(k).expect("label in range");
                if Some(k) == last {
                    let e = next.get_mut(prefix).expect("inserted above");
                    e.non_blank = lse(e.non_blank, beam.non_blank + lp);
                }
                let mut extended = prefix.clone();
                extended.push(c);
                let from = if Some(k) == last { beam.blank } else { total };
                let e = next.entry(extended).or_insert_with(|| {
                    let bonus = if Some(k) == space {
                        fusion.word_score(prefix)
                    } else {
                        0.0
                    };
                    Beam::empty(beam.lm + bonus)
                });
                e.non_blank = lse(e.non_blank, from + lp);
            }
        }
        let mut ranked: Vec<(f64, String, Beam)> = next
            .into_iter()
            .filter(|(_, b)| b.acoustic() > f64::NEG_INFINITY)
            .map(|(p, b)| (fusion.final_score(&p, &b), p, b))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        pruned |= ranked.len() > width;
        ranked.truncate(width);
        beams = ranked.into_iter().map(|(_, p, b)| (p, b)).collect();
    }

    let mut best: Option<Decoded> = None;
    for (prefix, beam) in beams {
        let d = Decoded {
            score: fusion.final_score(&prefix, &beam),
            text: prefix,
        };
        if best.as_ref().is_none_or(|b| better(&d, b)) {
            best = Some(d);
        }
    }
    (best, pruned)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain() -> DecodeConfig {
        DecodeConfig {
            beam_width: 8,
            lm_weight: 0.0,
            word_bonus: 0.0,
        }
    }

    #[test]
    fn empty_input_decodes_to_empty() {
        let v = CharVocab::new("a".chars()).unwrap();
        let d = beam_decode(&[], &v, None, &plain()).unwrap();
        assert_eq!(d.text, "");
    }

    #[test]
    fn sum_over_paths_beats_best_path() {
        let v = CharVocab::new("a".chars()).unwrap();
        let row = [0.6f64.ln(), 0.4f64.ln()];
        let d = beam_decode(&[&row, &row], &v, None, &plain()).unwrap();
        assert_eq!(d.text, "a");
        assert!((d.score - 0.64f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lm_rescues_known_word() {
        let v = CharVocab::new("abc ".chars()).unwrap();
        let lm = NGramLm::train("ab ab ab", 2, 0.4).unwrap();
        let ln = |p: f64| p.ln();
        // "ac" is acoustically more likely than "ab".
        let frames = [
            [ln(0.04), ln(0.9), ln(0.02), ln(0.02), ln(0.02)],
            [ln(0.06), ln(0.02), ln(0.4), ln(0.5), ln(0.02)],
        ];
        let rows: Vec<&[f64]> = frames.iter().map(|r| r.as_slice()).collect();
        let none = beam_decode(&rows, &v, None, &plain()).unwrap();
        let cfg = DecodeConfig {
            lm_weight: 2.0,
            ..plain()
        };
        let fused = beam_decode(&rows, &v, Some(&lm), &cfg).unwrap();
        assert_eq!(none.text, "ac");
        assert_eq!(fused.text, "ab");
    }

    #[test]
    fn rejects_bad_config_and_width() {
        let v = CharVocab::new("a".chars()).unwrap();
        let cfg = DecodeConfig {
            beam_width: 0,
            ..plain()
        };
        assert!(beam_decode(&[], &v, None, &cfg).is_err());
        let row = [0.0];
        assert!(beam_decode(&[&row], &v, None, &plain()).is_err());
    }
}
