//! Couplet language modelling toolkit.
//!
//! The crate covers the whole path from raw poems to scored generations:
//!
//! * [`corpus`]: poem ingestion, couplet extraction, rhyme filtering and
//!   deterministic train/validation splits.
//! * [`tokenizer`]: byte-pair encoding with a nibble byte-fallback range.
//! * [`model`]: a post-norm decoder-only transformer with a hand-written
//!   backward pass, label-smoothed cross-entropy and a finite-difference
//!   gradient checker.
//! * [`trainer`]: Adam with an inverse-square-root warmup schedule,
//!   epoch management and checkpointing.
//! * [`decoding`]: the logit pipeline (bigram penalty, fixed or annealed
//!   temperature, Top-K, nucleus) feeding a seeded sampler.
//! * [`eval`]: BLEU / Self-BLEU and the diversity-quality tradeoff report.
//!
//! Data-parallel inner loops (per-sequence gradients, sample generation,
//! per-hypothesis scoring) go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Results are
//! identical either way.

// Negated float comparisons are how validation rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod decoding;
pub mod eval;
pub mod model;
pub mod par;
pub mod tokenizer;
pub mod trainer;

/// Tool version reported by `--version` and recorded in manifests.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Hex-encoded SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
