//! Batch evaluation: beam decoding, per-utterance WER, duration-bucketed
//! report and decode dump.

use std::fmt::Write as _;

use crate::audio::{load_wav, UtteranceRecord};
use crate::decode::{beam_decode, frames_of, wer, DecodeConfig, NGramLm, WerResult};
use crate::error::{Error, Result};
use crate::train::Checkpoint;

pub const BUCKET_HEADER: &str = "bucket_start_s,bucket_end_s,count,wer";
pub const DUMP_HEADER: &str = "id\treference\thypothesis";

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    /// Audio length in seconds.
    pub duration: f64,
    pub wer: WerResult,
}

/// One duration bucket `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub bucket_start: f64,
    pub bucket_end: f64,
    pub count: usize,
    pub errors: usize,
    pub reference_words: usize,
    /// `errors / max(1, reference_words)` over the bucket.
    pub wer: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Non-empty buckets in ascending order.
    pub rows: Vec<ReportRow>,
    /// Manifest order.
    pub utterances: Vec<UtteranceResult>,
    /// Total errors over total reference words; `None` without utterances.
    pub aggregate: Option<f64>,
}

/// Pooled error rate of word-error counts.
pub fn pooled_wer<'a>(items: impl IntoIterator<Item = &'a WerResult>) -> (usize, usize, f64) {
    let (mut e, mut n) = (0, 0);
    for w in items {
        e += w.errors();
        n += w.reference_words;
    }
    (e, n, e as f64 / n.max(1) as f64)
}

/// Groups results into `bucket_seconds`-wide duration buckets.
pub fn build_report(utterances: Vec<UtteranceResult>, bucket_seconds: f64) -> Result<EvalReport> {
    if !(bucket_seconds > 0.0) {
        return Err(Error::Config("bucket width must be positive".into()));
    }
    let mut buckets: std::collections::BTreeMap<u64, Vec<&WerResult>> = Default::default();
    for u in &utterances {
        let b = (u.duration / bucket_seconds).floor() as u64;
        buckets.entry(b).or_default().push(&u.wer);
    }
    let rows = buckets
        .into_iter()
        .map(|(b, ws)| {
            let (errors, reference_words, wer) = pooled_wer(ws.iter().copied());
            ReportRow {
                bucket_start: b as f64 * bucket_seconds,
                bucket_end: (b + 1) as f64 * bucket_seconds,
                count: ws.len(),
                errors,
                reference_words,
                wer,
            }
        })
        .collect();
    let aggregate = (!utterances.is_empty()).then(|| pooled_wer(utterances.iter().map(|u| &u.wer)).2);
    Ok(EvalReport {
        rows,
        utterances,
        aggregate,
    })
}

impl EvalReport {
    pub fn buckets_csv(&self) -> String {
        let mut out = format!("{BUCKET_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.bucket_start, r.bucket_end, r.count, r.wer);
        }
        out
    }

    pub fn dump_tsv(&self) -> String {
        let mut out = format!("{DUMP_HEADER}\n");
        for u in &self.utterances {
            let _ = writeln!(out, "{}\t{}\t{}", u.id, u.reference, u.hypothesis);
        }
        out
    }

    /// Aggregate WER for display, `N/A` without utterances.
    pub fn aggregate_text(&self) -> String {
        self.aggregate.map_or_else(|| "N/A".to_string(), |w| w.to_string())
    }
}

/// `(id, reference, hypothesis)` rows of a decode dump.
pub fn parse_dump(tsv: &str) -> Result<Vec<(String, String, String)>> {
    let mut lines = tsv.lines();
    if lines.next() != Some(DUMP_HEADER) {
        return Err(Error::Config("decode dump lacks its header".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let parts: Vec<&str> = l.split('\t').collect();
            match parts.as_slice() {
                [id, r, h] => Ok((id.to_string(), r.to_string(), h.to_string())),
                _ => Err(Error::Config(format!("decode dump line {}: expected 3 fields", i + 2))),
            }
        })
        .collect()
}

/// Decodes every record with the beam decoder and scores it. Utterances are
/// decoded in parallel; results keep manifest order.
pub fn eval_report(
    ck: &Checkpoint,
    records: &[UtteranceRecord],
    lm: Option<&NGramLm>,
    decode: &DecodeConfig,
    bucket_seconds: f64,
) -> Result<EvalReport> {
    let vocab = ck
        .vocab
        .as_ref()
        .filter(|_| ck.model.has_ctc_head())
        .ok_or_else(|| Error::Checkpoint("checkpoint has no CTC head; fine-tune it first".into()))?;
    decode.validate()?;
    let score = |r: &UtteranceRecord| -> Result<UtteranceResult> {
        let run = || -> Result<UtteranceResult> {
            let w = load_wav(&r.audio_path)?;
            let lp = ck.model.ctc_log_probs(&w)?;
            let hyp = beam_decode(&frames_of(&lp), vocab, lm, decode)?.text;
            let hyp = hyp.split_whitespace().collect::<Vec<_>>().join(" ");
            Ok(UtteranceResult {
                id: r.id.clone(),
                reference: r.transcript.clone(),
                wer: wer(&r.transcript, &hyp),
                hypothesis: hyp,
                duration: w.duration(),
            })
        };
        run().map_err(|e| e.for_utterance(&r.id))
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = records.len().div_ceil(workers).max(1);
    let utterances = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(score).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("decode worker panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    build_report(utterances, bucket_seconds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(id: &str, r: &str, h: &str, duration: f64) -> UtteranceResult {
        UtteranceResult {
            id: id.into(),
            reference: r.into(),
            hypothesis: h.into(),
            duration,
            wer: wer(r, h),
        }
    }

    #[test]
    fn empty_manifest_is_header_only() {
        let rep = build_report(Vec::new(), 2.0).unwrap();
        assert_eq!(rep.buckets_csv(), format!("{BUCKET_HEADER}\n"));
        assert_eq!(rep.aggregate_text(), "N/A");
    }

    #[test]
    fn buckets_pool_counts() {
        let rep = build_report(
            vec![
                result("a", "x y", "x y", 0.5),
                result("b", "x y z w", "x q z", 3.1),
                result("c", "p", "p", 1.99),
            ],
            2.0,
        )
        .unwrap();
        assert_eq!(
            rep.buckets_csv(),
            format!("{BUCKET_HEADER}\n0,2,2,0\n2,4,1,0.5\n")
        );
        assert_eq!(rep.aggregate, Some(2.0 / 7.0));
        let back = parse_dump(&rep.dump_tsv()).unwrap();
        assert_eq!(back[1], ("b".into(), "x y z w".into(), "x q z".into()));
    }

    #[test]
    fn perfect_hypotheses_score_zero() {
        let rep = build_report(vec![result("a", "x", "x", 5.0), result("b", "y z", "y z", 0.1)], 2.0).unwrap();
        assert!(rep.rows.iter().all(|r| r.wer == 0.0));
        assert_eq!(rep.aggregate, Some(0.0));
    }
}
