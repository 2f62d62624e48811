//! Decoder-only transformer: parameters, exact forward/backward passes,
//! label-smoothed cross-entropy, a finite-difference gradient checker and a
//! binary checkpoint container.

mod checkpoint;
mod gradcheck;
mod transformer;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{directional_check, gradient_check, gradient_check_with, random_batch, GradCheckReport, TensorCheck};
pub use transformer::{
    attention_weights, evaluate_batch, forward, loss_and_grads, next_token_logits, sinusoidal_positions,
    smoothed_target_entropy, LossAndGrads, Pass,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    /// Full-scale model: 8 layers of width 512.
    fn default() -> Self {
        Self {
            d_model: 512,
            n_layers: 8,
            n_heads: 8,
            ffn_hidden: 2048,
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            context_len: 64,
            dropout: 0.1,
            tie_embeddings: false,
        }
    }
}

impl ModelConfig {
    /// The small model used by gradient checks: d=8, one layer, |V|=11, T=5.
    pub fn grad_check_tiny() -> Self {
        Self {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_hidden: 32,
            vocab_size: 11,
            context_len: 5,
            dropout: 0.0,
            tie_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn_hidden == 0 {
            return err("d_model, n_layers, n_heads and ffn_hidden must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < 2 {
            return err(format!("vocab_size must be at least 2, got {}", self.vocab_size));
        }
        if self.context_len == 0 {
            return err("context_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Sum of all tensor sizes, computed from the config alone.
    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.ffn_hidden, self.vocab_size);
        let per_layer = 4 * d * d + d * f + f + f * d + d + 4 * d;
        let output = if self.tie_embeddings { 0 } else { d * v };
        v * d + self.n_layers * per_layer + output
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("d_model".into(), self.d_model.to_string());
        m.insert("n_layers".into(), self.n_layers.to_string());
        m.insert("n_heads".into(), self.n_heads.to_string());
        m.insert("ffn_hidden".into(), self.ffn_hidden.to_string());
        m.insert("vocab_size".into(), self.vocab_size.to_string());
        m.insert("context_len".into(), self.context_len.to_string());
        m.insert("dropout".into(), self.dropout.to_string());
        m.insert("tie_embeddings".into(), self.tie_embeddings.to_string());
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        fn get<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T, ModelError> {
            let raw = kv.get(key).ok_or_else(|| ModelError::Config(format!("missing key {key}")))?;
            raw.parse().map_err(|_| ModelError::Config(format!("bad value {raw:?} for {key}")))
        }
        let cfg = Self {
            d_model: get(kv, "d_model")?,
            n_layers: get(kv, "n_layers")?,
            n_heads: get(kv, "n_heads")?,
            ffn_hidden: get(kv, "ffn_hidden")?,
            vocab_size: get(kv, "vocab_size")?,
            context_len: get(kv, "context_len")?,
            dropout: get(kv, "dropout")?,
            tie_embeddings: get(kv, "tie_embeddings")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
        }
    }
}

/// All learnable tensors. Linear maps act on row vectors (`x · W`), so a
/// `d_in × d_out` matrix maps width `d_in` to `d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `|V| × d` token embeddings.
    pub embedding: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// `d × |V|` output projection; `None` when tied to the embedding.
    pub output: Option<Array2<f64>>,
}

impl ModelParams {
    /// Same shapes as `config`, all zeros. Used for gradients and Adam moments.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, f, v) = (config.d_model, config.ffn_hidden, config.vocab_size);
        Self {
            config: config.clone(),
            embedding: Array2::zeros((v, d)),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(d, f)).collect(),
            output: (!config.tie_embeddings).then(|| Array2::zeros((d, v))),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// `(name, shape)` of every tensor in canonical order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors().into_iter().map(|(n, _, s)| (n, s)).collect()
    }

    /// Every tensor as `(name, row-major data, shape)` in canonical order.
    pub fn tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        fn a2(name: String, a: &Array2<f64>) -> (String, &[f64], Vec<usize>) {
            (name, a.as_slice().expect("standard layout"), a.shape().to_vec())
        }
        fn a1(name: String, a: &Array1<f64>) -> (String, &[f64], Vec<usize>) {
            (name, a.as_slice().expect("standard layout"), a.shape().to_vec())
        }
        let mut out = vec![a2("embedding".into(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layer{i}.{n}");
            out.push(a2(p("wq"), &l.wq));
            out.push(a2(p("wk"), &l.wk));
            out.push(a2(p("wv"), &l.wv));
            out.push(a2(p("wo"), &l.wo));
            out.push(a1(p("ln1_gain"), &l.ln1_gain));
            out.push(a1(p("ln1_bias"), &l.ln1_bias));
            out.push(a2(p("w1"), &l.w1));
            out.push(a1(p("b1"), &l.b1));
            out.push(a2(p("w2"), &l.w2));
            out.push(a1(p("b2"), &l.b2));
            out.push(a1(p("ln2_gain"), &l.ln2_gain));
            out.push(a1(p("ln2_bias"), &l.ln2_bias));
        }
        if let Some(o) = &self.output {
            out.push(a2("output".into(), o));
        }
        out
    }

    /// Mutable view of every tensor, same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embedding.as_slice_mut().expect("standard layout")];
        for l in &mut self.layers {
            let LayerParams { wq, wk, wv, wo, ln1_gain, ln1_bias, w1, b1, w2, b2, ln2_gain, ln2_bias } = l;
            out.push(wq.as_slice_mut().expect("standard layout"));
            out.push(wk.as_slice_mut().expect("standard layout"));
            out.push(wv.as_slice_mut().expect("standard layout"));
            out.push(wo.as_slice_mut().expect("standard layout"));
            out.push(ln1_gain.as_slice_mut().expect("standard layout"));
            out.push(ln1_bias.as_slice_mut().expect("standard layout"));
            out.push(w1.as_slice_mut().expect("standard layout"));
            out.push(b1.as_slice_mut().expect("standard layout"));
            out.push(w2.as_slice_mut().expect("standard layout"));
            out.push(b2.as_slice_mut().expect("standard layout"));
            out.push(ln2_gain.as_slice_mut().expect("standard layout"));
            out.push(ln2_bias.as_slice_mut().expect("standard layout"));
        }
        if let Some(o) = &mut self.output {
            out.push(o.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, d, _)| d.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, d, _)| d.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, d, _)| d.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, d, _)| d.iter().map(|x| x * x).sum::<f64>()).sum()
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
}

/// Deterministic initialization: Glorot-uniform linear weights, N(0, 0.02)
/// embeddings, unit layer-norm gains and zero biases.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let (d, f, v) = (config.d_model, config.ffn_hidden, config.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let embedding = Array2::from_shape_simple_fn((v, d), || normal.sample(&mut rng));
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            wq: glorot(&mut rng, d, d),
            wk: glorot(&mut rng, d, d),
            wv: glorot(&mut rng, d, d),
            wo: glorot(&mut rng, d, d),
            ln1_gain: Array1::ones(d),
            ln1_bias: Array1::zeros(d),
            w1: glorot(&mut rng, d, f),
            b1: Array1::zeros(f),
            w2: glorot(&mut rng, f, d),
            b2: Array1::zeros(d),
            ln2_gain: Array1::ones(d),
            ln2_bias: Array1::zeros(d),
        })
        .collect();
    let output = (!config.tie_embeddings).then(|| glorot(&mut rng, d, v));
    Ok(ModelParams { config: config.clone(), embedding, layers, output })
}

/// Token matrix `B × T`; the target at position `i` is the token at `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    rows: Vec<Vec<u32>>,
    seq_len: usize,
}

impl Batch {
    pub fn new(rows: Vec<Vec<u32>>) -> Result<Self, ModelError> {
        let seq_len = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || seq_len == 0 {
            return Err(ModelError::Batch("batch must have at least one non-empty row".into()));
        }
        if rows.iter().any(|r| r.len() != seq_len) {
            return Err(ModelError::Batch("all rows must have the same length".into()));
        }
        Ok(Self { rows, seq_len })
    }

    /// Right-pads every sequence with PAD to the longest one.
    pub fn padded(seqs: &[Vec<u32>]) -> Result<Self, ModelError> {
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let rows = seqs
            .iter()
            .map(|s| {
                let mut r = s.clone();
                r.resize(t, crate::tokenizer::PAD);
                r
            })
            .collect();
        Self::new(rows)
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn batch_size(&self) -> usize {
        self.rows.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn validate_for(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.seq_len > config.context_len {
            return Err(ModelError::SequenceTooLong { len: self.seq_len, context_len: config.context_len });
        }
        for &id in self.rows.iter().flatten() {
            if id as usize >= config.vocab_size {
                return Err(ModelError::TokenOutOfRange { id, vocab_size: config.vocab_size });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::grad_check_tiny();
        assert_eq!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 3).unwrap());
        assert_ne!(init_model(&cfg, 3).unwrap(), init_model(&cfg, 4).unwrap());
    }

    #[test]
    fn layer_norm_gains_start_at_one() {
        let p = init_model(&ModelConfig::grad_check_tiny(), 0).unwrap();
        for l in &p.layers {
            assert!(l.ln1_gain.iter().chain(l.ln2_gain.iter()).all(|&g| g == 1.0));
            assert!(l.ln1_bias.iter().chain(l.ln2_bias.iter()).all(|&b| b == 0.0));
        }
    }

    #[test]
    fn full_scale_param_count() {
        // Independent tally of the listed tensors for d=512, N=8, |V|=8000.
        let (d, f, v, n) = (512usize, 2048usize, 8000usize, 8usize);
        let embedding = v * d;
        let attention = 4 * d * d;
        let ffn = d * f + f + f * d + d;
        let norms = 2 * (d + d);
        let projection = d * v;
        let expected = embedding + n * (attention + ffn + norms) + projection;
        let cfg = ModelConfig { context_len: 8, ..ModelConfig::default() };
        assert_eq!(cfg.param_count(), expected);
        let zeros = ModelParams::zeros(&cfg);
        assert_eq!(zeros.param_count(), expected);
        let reported = 33.0e6;
        assert!((expected as f64 - reported).abs() / reported < 0.15, "{expected}");
    }

    #[test]
    fn tied_model_has_no_output_tensor() {
        let cfg = ModelConfig { tie_embeddings: true, ..ModelConfig::grad_check_tiny() };
        let p = init_model(&cfg, 1).unwrap();
        assert!(p.output.is_none());
        assert_eq!(p.param_count(), cfg.param_count());
        assert!(p.tensors().iter().all(|(n, _, _)| n != "output"));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig { n_heads: 3, ..ModelConfig::grad_check_tiny() };
        assert!(matches!(init_model(&bad, 0), Err(ModelError::Config(_))));
        let bad = ModelConfig { dropout: 1.0, ..ModelConfig::grad_check_tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_kv_roundtrip() {
        let cfg = ModelConfig { tie_embeddings: true, dropout: 0.25, ..ModelConfig::grad_check_tiny() };
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn batch_validation() {
        let cfg = ModelConfig::grad_check_tiny();
        assert!(Batch::new(vec![vec![1, 2], vec![1]]).is_err());
        let b = Batch::new(vec![vec![1, 2, 11]]).unwrap();
        assert!(matches!(b.validate_for(&cfg), Err(ModelError::TokenOutOfRange { id: 11, .. })));
        let b = Batch::new(vec![vec![1; 6]]).unwrap();
        assert!(matches!(b.validate_for(&cfg), Err(ModelError::SequenceTooLong { .. })));
        let b = Batch::padded(&[vec![5, 6, 7], vec![5]]).unwrap();
        assert_eq!(b.rows()[1], vec![5, crate::tokenizer::PAD, crate::tokenizer::PAD]);
    }
}
