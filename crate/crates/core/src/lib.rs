//! Self-supervised speech representation pipeline at desk scale.
//!
//! Raw audio goes through a strided convolutional feature encoder, a
//! Gumbel-softmax product quantizer and a transformer context network.
//! Pretraining masks spans of encoder frames and asks the context network to
//! pick the true quantized frame among distractors; fine-tuning adds a CTC
//! character head. Decoding uses CTC prefix beam search fused with a 4-gram
//! word language model, and utterance embeddings drive nearest-centroid
//! speaker identification.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod config;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod model;
pub mod objective;
pub mod report;
pub mod speaker;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
