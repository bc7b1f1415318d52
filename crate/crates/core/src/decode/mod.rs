//! Word n-gram language model, CTC prefix beam search with shallow fusion,
//! and word error rate.

mod beam;
mod lm;
mod wer;

pub use beam::{beam_decode, frames_of, Decoded, DecodeConfig};
pub use lm::{lm_logprob, train_ngram, NGramLm, DEFAULT_BACKOFF, MAX_ORDER, UNK};
pub use wer::{wer, WerResult};
