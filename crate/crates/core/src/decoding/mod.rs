//! Logit processing and sampling for unconditional couplet generation.
//!
//! Per step: Anti-LM bigram penalty on raw logits, temperature softmax,
//! Top-K restriction, nucleus restriction, seeded categorical draw.
//! Ties always go to the lower token id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Couplet;
use crate::model::{next_token_logits, ModelError, ModelParams};
use crate::par;
use crate::tokenizer::{BpeModel, BOS, EOS, PAD, SEP};

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_P: f64 = 0.9;
pub const DEFAULT_MAX_TOKENS: usize = 64;
const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decoding config: {0}")]
    InvalidConfig(String),
    #[error("invalid logits: {0}")]
    InvalidLogits(String),
    #[error("malformed generation file: {0}")]
    Format(String),
    #[error("checkpoint vocabulary ({model}) does not match tokenizer vocabulary ({tokenizer})")]
    VocabMismatch { model: usize, tokenizer: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Logits over the vocabulary; masked entries hold `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DecodeError> {
        if let Some(bad) = values.iter().find(|x| x.is_nan() || **x == f64::INFINITY) {
            return Err(DecodeError::InvalidLogits(format!("entry {bad} is neither finite nor -inf")));
        }
        if !values.iter().any(|x| x.is_finite()) {
            return Err(DecodeError::InvalidLogits("every entry is masked".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_masked(&self, id: usize) -> bool {
        self.0[id] == f64::NEG_INFINITY
    }

    pub fn n_unmasked(&self) -> usize {
        self.0.iter().filter(|x| x.is_finite()).count()
    }

    /// Highest logit, lower id on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Ids ordered by descending value, ascending id among equal values.
fn ranked(xs: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..xs.len()).collect();
    ids.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    ids
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TemperatureMode {
    Fixed { t: f64 },
    Annealed { t0: f64, tf: f64, step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AntiLm {
    Off,
    /// Logit penalty for repeating a prefix bigram; infinity bans it.
    Penalty(f64),
}

impl AntiLm {
    pub fn parse(s: &str) -> Result<Self, DecodeError> {
        match s.trim() {
            "off" | "none" => Ok(AntiLm::Off),
            "inf" | "infinity" => Ok(AntiLm::Penalty(f64::INFINITY)),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|l| *l >= 0.0)
                .map(AntiLm::Penalty)
                .ok_or_else(|| DecodeError::InvalidConfig(format!("anti_lm must be off, inf or a non-negative number, got {other:?}"))),
        }
    }
}

impl fmt::Display for AntiLm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AntiLm::Off => write!(f, "off"),
            AntiLm::Penalty(l) if l.is_infinite() => write!(f, "inf"),
            AntiLm::Penalty(l) => write!(f, "{l}"),
        }
    }
}

impl Serialize for AntiLm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeConfig {
    pub k: usize,
    pub p: f64,
    pub temperature: TemperatureMode,
    pub anti_lm: AntiLm,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            p: DEFAULT_P,
            temperature: TemperatureMode::Fixed { t: 1.0 },
            anti_lm: AntiLm::Penalty(f64::INFINITY),
            max_tokens: DEFAULT_MAX_TOKENS,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let err = |m: String| Err(DecodeError::InvalidConfig(m));
        if self.k == 0 {
            return err("k must be at least 1".into());
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return err(format!("p must lie in (0, 1], got {}", self.p));
        }
        match self.temperature {
            TemperatureMode::Fixed { t } if !(t > 0.0 && t.is_finite()) => {
                return err(format!("t must be positive, got {t}"));
            }
            TemperatureMode::Annealed { t0, tf, step } => {
                if !(tf > 0.0 && tf.is_finite() && t0.is_finite()) {
                    return err(format!("tf must be positive, got {tf}"));
                }
                if tf > t0 {
                    return err(format!("tf ({tf}) must not exceed t0 ({t0})"));
                }
                if !(step > 0.0 && step.is_finite()) {
                    return err(format!("anneal_step must be positive, got {step}"));
                }
            }
            _ => {}
        }
        if let AntiLm::Penalty(l) = self.anti_lm {
            if !(l >= 0.0) {
                return err(format!("anti_lm penalty must be non-negative, got {l}"));
            }
        }
        if self.max_tokens == 0 {
            return err("max_tokens must be at least 1".into());
        }
        Ok(())
    }

    pub fn temperature_at(&self, i: usize) -> f64 {
        match self.temperature {
            TemperatureMode::Fixed { t } => t,
            TemperatureMode::Annealed { t0, tf, step } => annealing_temperature(i, t0, tf, step),
        }
    }

    /// Short human-readable recipe name, e.g. `t=0.7 k=20 p=0.9 anti_lm=inf`.
    pub fn label(&self) -> String {
        let temp = match self.temperature {
            TemperatureMode::Fixed { t } => format!("t={t}"),
            TemperatureMode::Annealed { t0, tf, step } => format!("t0={t0} tf={tf} step={step}"),
        };
        format!("{temp} k={} p={} anti_lm={}", self.k, self.p, self.anti_lm)
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        match self.temperature {
            TemperatureMode::Fixed { t } => {
                kv.insert("t".into(), t.to_string());
            }
            TemperatureMode::Annealed { t0, tf, step } => {
                kv.insert("t0".into(), t0.to_string());
                kv.insert("tf".into(), tf.to_string());
                kv.insert("anneal_step".into(), step.to_string());
            }
        }
        kv.insert("k".into(), self.k.to_string());
        kv.insert("p".into(), self.p.to_string());
        kv.insert("anti_lm".into(), self.anti_lm.to_string());
        kv.insert("max_tokens".into(), self.max_tokens.to_string());
        kv.insert("seed".into(), self.seed.to_string());
        kv
    }
}

/// Softmax of `u / t`; masked entries get probability 0.
pub fn apply_temperature(u: &LogitVector, t: f64) -> Result<Vec<f64>, DecodeError> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(DecodeError::InvalidConfig(format!("temperature must be positive, got {t}")));
    }
    let max = u.0.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = u.0.iter().map(|&x| if x.is_finite() { ((x - max) / t).exp() } else { 0.0 }).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Keeps the `k` highest logits and masks the rest.
pub fn top_k_filter(u: &LogitVector, k: usize) -> Result<LogitVector, DecodeError> {
    if k == 0 {
        return Err(DecodeError::InvalidConfig("k must be at least 1".into()));
    }
    if k >= u.len() {
        return Ok(u.clone());
    }
    let mut out = vec![f64::NEG_INFINITY; u.len()];
    for id in ranked(&u.0).into_iter().take(k) {
        out[id] = u.0[id];
    }
    Ok(LogitVector(out))
}

/// Same restriction on a probability vector, renormalized.
pub fn top_k_probs(probs: &[f64], k: usize) -> Result<Vec<f64>, DecodeError> {
    if k == 0 {
        return Err(DecodeError::InvalidConfig("k must be at least 1".into()));
    }
    let mut out = vec![0.0; probs.len()];
    for id in ranked(probs).into_iter().take(k) {
        out[id] = probs[id];
    }
    renormalize(out)
}

fn renormalize(mut probs: Vec<f64>) -> Result<Vec<f64>, DecodeError> {
    let z: f64 = probs.iter().sum();
    if !(z > 0.0) {
        return Err(DecodeError::InvalidLogits("no probability mass left".into()));
    }
    probs.iter_mut().for_each(|x| *x /= z);
    Ok(probs)
}

/// Smallest descending-probability prefix with cumulative mass at least `p`,
/// renormalized. `p = 1` keeps every token with non-zero probability.
pub fn nucleus_filter(probs: &[f64], p: f64) -> Result<Vec<f64>, DecodeError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(DecodeError::InvalidConfig(format!("p must lie in (0, 1], got {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE || probs.iter().any(|x| !(*x >= 0.0)) {
        return Err(DecodeError::InvalidLogits(format!("not a distribution (sum {total})")));
    }
    let mut out = vec![0.0; probs.len()];
    let mut cum = 0.0;
    for id in ranked(probs) {
        if probs[id] == 0.0 {
            break;
        }
        out[id] = probs[id];
        cum += probs[id];
        if p < 1.0 && cum >= p {
            break;
        }
    }
    renormalize(out)
}

/// Result of one penalty application.
#[derive(Debug, Clone, PartialEq)]
pub struct Penalized {
    pub logits: LogitVector,
    /// Distinct tokens whose logit was lowered.
    pub count: usize,
    /// The ban would have masked every candidate and was not applied.
    pub skipped: bool,
}

/// Lowers by `lambda` the logit of every token `b` such that `(last, b)`
/// already occurs in `prefix`, where `last` is the final prefix token.
pub fn anti_lm_penalty(u: &LogitVector, prefix: &[u32], lambda: f64) -> Penalized {
    let unchanged = |skipped| Penalized { logits: u.clone(), count: 0, skipped };
    let Some(&last) = prefix.last() else { return unchanged(false) };
    if lambda == 0.0 {
        return unchanged(false);
    }
    let targets: BTreeSet<usize> = prefix
        .windows(2)
        .filter(|w| w[0] == last)
        .map(|w| w[1] as usize)
        .filter(|&b| b < u.len() && !u.is_masked(b))
        .collect();
    if targets.is_empty() {
        return unchanged(false);
    }
    let mut out = u.0.clone();
    for &b in &targets {
        out[b] = if lambda.is_infinite() { f64::NEG_INFINITY } else { out[b] - lambda };
    }
    if !out.iter().any(|x| x.is_finite()) {
        return unchanged(true);
    }
    Penalized { logits: LogitVector(out), count: targets.len(), skipped: false }
}

/// `max(tf, t0 - i * step)`.
pub fn annealing_temperature(i: usize, t0: f64, tf: f64, step: f64) -> f64 {
    tf.max(t0 - i as f64 * step)
}

/// Final per-step distribution: penalty, temperature, Top-K, nucleus.
/// Returns the distribution and the penalty outcome.
pub fn step_distribution(
    logits: &LogitVector,
    prefix: &[u32],
    temperature: f64,
    cfg: &DecodeConfig,
) -> Result<(Vec<f64>, Penalized), DecodeError> {
    let penalized = match cfg.anti_lm {
        AntiLm::Off => Penalized { logits: logits.clone(), count: 0, skipped: false },
        AntiLm::Penalty(l) => anti_lm_penalty(logits, prefix, l),
    };
    let probs = apply_temperature(&penalized.logits, temperature)?;
    let probs = top_k_probs(&probs, cfg.k)?;
    let probs = nucleus_filter(&probs, cfg.p)?;
    Ok((probs, penalized))
}

/// Inverse-CDF draw in id order.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_nonzero = i;
            if u < cum {
                return i;
            }
        }
    }
    last_nonzero
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GenerationTrace {
    pub tokens: Vec<u32>,
    pub temperatures: Vec<f64>,
    pub candidates: Vec<usize>,
    pub penalized: Vec<usize>,
    /// Steps at which the Anti-LM ban was skipped to keep a candidate.
    pub skip_events: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Hemistichs joined by a tab; best-effort text when malformed.
    pub text: String,
    pub couplet: Option<Couplet>,
    /// Emitted ids, BOS excluded, EOS included when produced.
    pub tokens: Vec<u32>,
    pub malformed: bool,
    pub sample_index: usize,
    pub trace: GenerationTrace,
}

fn check_vocab(params: &ModelParams, tokenizer: &BpeModel) -> Result<(), DecodeError> {
    if params.config.vocab_size != tokenizer.vocab_size() {
        return Err(DecodeError::VocabMismatch { model: params.config.vocab_size, tokenizer: tokenizer.vocab_size() });
    }
    Ok(())
}

/// Generates the sample with index 0.
pub fn generate(params: &ModelParams, tokenizer: &BpeModel, cfg: &DecodeConfig) -> Result<Generation, DecodeError> {
    cfg.validate()?;
    check_vocab(params, tokenizer)?;
    generate_one(params, tokenizer, cfg, 0)
}

/// Generates `n` samples; sample `i` draws from RNG stream `i` of `cfg.seed`.
pub fn generate_batch(
    params: &ModelParams,
    tokenizer: &BpeModel,
    cfg: &DecodeConfig,
    n: usize,
) -> Result<Vec<Generation>, DecodeError> {
    cfg.validate()?;
    check_vocab(params, tokenizer)?;
    par::map_range(n, |i| generate_one(params, tokenizer, cfg, i)).into_iter().collect()
}

fn generate_one(params: &ModelParams, tokenizer: &BpeModel, cfg: &DecodeConfig, index: usize) -> Result<Generation, DecodeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let budget = cfg.max_tokens.min(params.config.context_len.saturating_sub(1)).max(1);
    let mut seq = vec![BOS];
    let mut trace = GenerationTrace::default();
    for i in 0..budget {
        let mut raw = next_token_logits(params, &seq)?;
        raw[BOS as usize] = f64::NEG_INFINITY;
        raw[PAD as usize] = f64::NEG_INFINITY;
        let logits = LogitVector::new(raw)?;
        let t = cfg.temperature_at(i);
        let (probs, pen) = step_distribution(&logits, &seq, t, cfg)?;
        let tok = sample_categorical(&probs, &mut rng) as u32;
        trace.tokens.push(tok);
        trace.temperatures.push(t);
        trace.candidates.push(probs.iter().filter(|&&p| p > 0.0).count());
        trace.penalized.push(pen.count);
        if pen.skipped {
            trace.skip_events.push(i);
        }
        seq.push(tok);
        if tok == EOS {
            break;
        }
    }
    let tokens = seq[1..].to_vec();
    let (text, couplet) = assemble(tokenizer, &tokens);
    let malformed = couplet.is_none();
    Ok(Generation { text, couplet, tokens, malformed, sample_index: index, trace })
}

/// Splits at the first SEP and stops at EOS. Anything else is malformed.
fn assemble(tokenizer: &BpeModel, tokens: &[u32]) -> (String, Option<Couplet>) {
    let lossy = |ids: &[u32]| tokenizer.decode_with(ids, "\t").unwrap_or_default();
    let Some(end) = tokens.iter().position(|&t| t == EOS) else { return (lossy(tokens), None) };
    let body = &tokens[..end];
    let Some(sep) = body.iter().position(|&t| t == SEP) else { return (lossy(body), None) };
    if body[sep + 1..].contains(&SEP) {
        return (lossy(body), None);
    }
    let first = lossy(&body[..sep]);
    let second = lossy(&body[sep + 1..]);
    match Couplet::new(&first, &second, "generated") {
        Some(c) => (format!("{}\t{}", c.first, c.second), Some(c)),
        None => (lossy(body), None),
    }
}

/// The fields of a generation record needed for scoring.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct GenerationRecord {
    pub text: String,
    pub tokens: Vec<u32>,
    pub malformed: bool,
}

/// Parses JSONL written by [`generations_to_jsonl`]; blank lines are skipped.
pub fn read_generations_jsonl(text: &str) -> Result<Vec<GenerationRecord>, DecodeError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DecodeError::Format(format!("generation record on line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Serialize)]
struct Record<'a> {
    text: &'a str,
    tokens: &'a [u32],
    seed: u64,
    sample: usize,
    config: &'a DecodeConfig,
    malformed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a GenerationTrace>,
}

/// One JSON object per line.
pub fn generations_to_jsonl(samples: &[Generation], cfg: &DecodeConfig, with_trace: bool) -> String {
    let mut out = String::new();
    for g in samples {
        let rec = Record {
            text: &g.text,
            tokens: &g.tokens,
            seed: cfg.seed,
            sample: g.sample_index,
            config: cfg,
            malformed: g.malformed,
            trace: with_trace.then_some(&g.trace),
        };
        out.push_str(&serde_json::to_string(&rec).expect("generation record serializes"));
        out.push('\n');
    }
    out
}
