use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Token standing in for words absent from the training corpus.
pub const UNK: &str = "<unk>";
/// Default backoff factor.
pub const DEFAULT_BACKOFF: f64 = 0.4;
pub const MAX_ORDER: usize = 4;

const MAGIC: &[u8; 4] = b"NGLM";
const VERSION: u8 = 1;

/// Word n-gram model: maximum likelihood at the longest matching history,
/// constant backoff below it, add-one unigrams at the bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramLm {
    n: usize,
    backoff: f64,
    vocab: BTreeSet<String>,
    /// `counts[k - 1]` holds every observed k-gram.
    counts: Vec<BTreeMap<Vec<String>, u64>>,
    /// `continuations[k - 1]` sums `counts[k]` over the final word, keyed by
    /// the k-word history.
    continuations: Vec<BTreeMap<Vec<String>, u64>>,
    tokens: u64,
}

impl NGramLm {
    /// Counts n-grams of every order up to `n`; n-grams never span lines.
    pub fn train(corpus: &str, n: usize, backoff: f64) -> Result<Self> {
        if !(1..=MAX_ORDER).contains(&n) {
            return Err(Error::Lm(format!("order must be 1..={MAX_ORDER}, got {n}")));
        }
        if !(backoff > 0.0 && backoff <= 1.0) {
            return Err(Error::Lm(format!("backoff must be in (0, 1], got {backoff}")));
        }
        let mut counts = vec![BTreeMap::new(); n];
        for line in corpus.lines() {
            let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
            for k in 1..=n {
                for gram in words.windows(k) {
                    *counts[k - 1].entry(gram.to_vec()).or_insert(0) += 1;
                }
            }
        }
        if counts[0].is_empty() {
            return Err(Error::Lm("empty corpus".into()));
        }
        Self::from_counts(n, backoff, counts)
    }

    fn from_counts(n: usize, backoff: f64, counts: Vec<BTreeMap<Vec<String>, u64>>) -> Result<Self> {
        let vocab: BTreeSet<String> = counts[0].keys().map(|k| k[0].clone()).collect();
        if vocab.contains(UNK) {
            return Err(Error::Lm(format!("corpus may not contain {UNK}")));
        }
        let tokens = counts[0].values().sum();
        let mut continuations = vec![BTreeMap::new(); n.saturating_sub(1)];
        for k in 2..=n {
            for (gram, &c) in &counts[k - 1] {
                *continuations[k - 2]
                    .entry(gram[..k - 1].to_vec())
                    .or_insert(0) += c;
            }
        }
        Ok(Self {
            n,
            backoff,
            vocab,
            counts,
            continuations,
            tokens,
        })
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn backoff(&self) -> f64 {
        self.backoff
    }

    /// Known words, excluding [`UNK`].
    pub fn vocab(&self) -> &BTreeSet<String> {
        &self.vocab
    }

    fn canonical(&self, w: &str) -> String {
        if self.vocab.contains(w) {
            w.to_string()
        } else {
            UNK.to_string()
        }
    }

    fn unigram(&self, w: &str) -> f64 {
        let c = self.counts[0].get(&vec![w.to_string()]).copied().unwrap_or(0);
        (c + 1) as f64 / (self.tokens + self.vocab.len() as u64 + 1) as f64
    }

    /// `P(word | history)` using at most `n - 1` trailing history words.
    pub fn prob<S: AsRef<str>>(&self, history: &[S], word: &str) -> f64 {
        let w = self.canonical(word);
        let keep = history.len().min(self.n - 1);
        let h: Vec<String> = history[history.len() - keep..]
            .iter()
            .map(|s| self.canonical(s.as_ref()))
            .collect();
        self.prob_canonical(&h, &w)
    }

    fn prob_canonical(&self, h: &[String], w: &str) -> f64 {
        if h.is_empty() {
            return self.unigram(w);
        }
        let k = h.len();
        let mut gram = h.to_vec();
        gram.push(w.to_string());
        if let Some(&c) = self.counts[k].get(&gram) {
            let total = self.continuations[k - 1][h];
            return c as f64 / total as f64;
        }
        self.backoff * self.prob_canonical(&h[1..], w)
    }

    /// Sum of per-word conditional log-probabilities.
    pub fn logprob<S: AsRef<str>>(&self, words: &[S]) -> f64 {
        (0..words.len())
            .map(|i| self.prob(&words[..i], words[i].as_ref()).ln())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let words: Vec<&String> = self.vocab.iter().collect();
        let index: BTreeMap<&str, u32> = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i as u32))
            .collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.n as u8);
        out.extend_from_slice(&self.backoff.to_le_bytes());
        out.extend_from_slice(&(words.len() as u32).to_le_bytes());
        for w in &words {
            out.extend_from_slice(&(w.len() as u32).to_le_bytes());
            out.extend_from_slice(w.as_bytes());
        }
        for table in &self.counts {
            out.extend_from_slice(&(table.len() as u32).to_le_bytes());
            for (gram, &c) in table {
                for w in gram {
                    out.extend_from_slice(&index[w.as_str()].to_le_bytes());
                }
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Lm("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Lm(format!("unsupported version {version}")));
        }
        let n = r.take(1)?[0] as usize;
        if !(1..=MAX_ORDER).contains(&n) {
            return Err(Error::Lm(format!("invalid order {n}")));
        }
        let backoff = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let n_words = r.u32()? as usize;
        let mut words = Vec::with_capacity(n_words.min(bytes.len()));
        for _ in 0..n_words {
            let len = r.u32()? as usize;
            let w = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Lm("word is not UTF-8".into()))?;
            words.push(w.to_string());
        }
        let mut counts = Vec::with_capacity(n);
        for k in 1..=n {
            let entries = r.u32()? as usize;
            let mut table = BTreeMap::new();
            for _ in 0..entries {
                let mut gram = Vec::with_capacity(k);
                for _ in 0..k {
                    let i = r.u32()? as usize;
                    gram.push(
                        words
                            .get(i)
                            .ok_or_else(|| Error::Lm(format!("word index {i} out of range")))?
                            .clone(),
                    );
                }
                let c = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                table.insert(gram, c);
            }
            counts.push(table);
        }
        if r.pos != bytes.len() {
            return Err(Error::Lm("trailing bytes".into()));
        }
        if counts[0].is_empty() {
            return Err(Error::Lm("model has no unigrams".into()));
        }
        Self::from_counts(n, backoff, counts)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Trains an order-`n` model with the default backoff.
pub fn train_ngram(corpus: &str, n: usize) -> Result<NGramLm> {
    NGramLm::train(corpus, n, DEFAULT_BACKOFF)
}

/// Log-probability of a word sequence; OOV words score as [`UNK`].
pub fn lm_logprob<S: AsRef<str>>(lm: &NGramLm, words: &[S]) -> f64 {
    lm.logprob(words)
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
            .ok_or_else(|| Error::Lm("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
