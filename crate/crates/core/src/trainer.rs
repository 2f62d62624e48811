//! Optimization loop: Adam, the inverse-square-root warmup schedule, epoch
//! management, validation loss and checkpointing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Couplet, DatasetSplit};
use crate::model::{self, init_model, loss_and_grads, Batch, ModelConfig, ModelError, ModelParams, Pass};
use crate::tokenizer::BpeModel;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite gradient in {tensor}; step rejected")]
    NonFiniteGradient { tensor: String },
    #[error("training diverged at step {step}: {message}")]
    Divergence { step: u64, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub smoothing: f64,
    pub seed: u64,
    /// Global-norm clip threshold; `None` leaves gradients untouched.
    pub clip_grad_norm: Option<f64>,
    /// Write `epoch-NNNN.ckpt` after every epoch (best/last are always kept).
    pub epoch_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            warmup_steps: 4000,
            epochs: 12,
            batch_size: 32,
            smoothing: 0.1,
            seed: 0,
            clip_grad_norm: None,
            epoch_checkpoints: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return err(format!("beta1 must lie in (0, 1), got {}", self.beta1));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return err(format!("beta2 must lie in (0, 1), got {}", self.beta2));
        }
        if !(self.adam_eps > 0.0) {
            return err(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.warmup_steps == 0 {
            return err("warmup_steps must be at least 1".into());
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return err(format!("smoothing must lie in [0, 1), got {}", self.smoothing));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return err(format!("clip_grad_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// `d_model^-1/2 * min(step^-1/2, step * warmup^-3/2)`.
pub fn lr_at(step: u64, d_model: usize, warmup: u64) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::InvalidInput("learning-rate step counts from 1".into()));
    }
    if warmup == 0 {
        return Err(TrainError::InvalidInput("warmup must be at least 1".into()));
    }
    let s = step as f64;
    let decay = s.powf(-0.5);
    let ramp = s * (warmup as f64).powf(-1.5);
    Ok((d_model as f64).powf(-0.5) * decay.min(ramp))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update. A non-finite gradient rejects the whole
/// step before anything is modified.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if !(lr > 0.0) {
        return Err(TrainError::InvalidInput(format!("learning rate must be positive, got {lr}")));
    }
    let grad_tensors = grads.tensors();
    if let Some((name, _, _)) = grad_tensors.iter().find(|(_, g, _)| g.iter().any(|x| !x.is_finite())) {
        return Err(TrainError::NonFiniteGradient { tensor: name.clone() });
    }
    if grad_tensors.len() != state.m.tensors().len() {
        return Err(TrainError::InvalidInput("gradient and optimizer shapes differ".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.adam_eps);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors.iter().map(|(_, g, _)| *g))
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainMetrics {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Training couplets longer than the context window, left out.
    pub skipped_too_long: usize,
}

impl TrainMetrics {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,train_loss\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{}", r.step, r.epoch, r.lr, r.train_loss);
        }
        s
    }

    pub fn validation_csv(&self) -> String {
        let mut s = String::from("epoch,val_loss\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{},{}", r.epoch, r.val_loss);
        }
        s
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.lr).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: TrainMetrics,
    pub final_params: ModelParams,
    pub best_params: ModelParams,
    pub checkpoints: Vec<PathBuf>,
}

/// Context length covering the 99.9th percentile of encoded lengths.
pub fn derive_context_len(lengths: &[usize]) -> usize {
    if lengths.is_empty() {
        return 1;
    }
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    let rank = ((0.999 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Token-weighted mean smoothed cross-entropy over a couplet set, dropout off.
/// Couplets are evaluated in chunks of `batch_size`; the result equals the
/// position-weighted mean of the per-chunk losses.
pub fn evaluate_loss(
    params: &ModelParams,
    data: &[Couplet],
    tokenizer: &BpeModel,
    smoothing: f64,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Err(TrainError::InvalidInput("cannot evaluate loss on an empty set".into()));
    }
    let encoded: Vec<Vec<u32>> = data.iter().map(|c| tokenizer.encode_couplet(c)).collect();
    evaluate_encoded(params, &encoded, smoothing, batch_size)
}

fn evaluate_encoded(params: &ModelParams, encoded: &[Vec<u32>], smoothing: f64, batch_size: usize) -> Result<f64, TrainError> {
    let mut sum = 0.0;
    let mut count = 0;
    for chunk in encoded.chunks(batch_size.max(1)) {
        let (s, c) = model::evaluate_batch(params, &Batch::padded(chunk)?, smoothing)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(TrainError::InvalidInput("no target positions to evaluate".into()));
    }
    Ok(sum / count as f64)
}

fn write_file(path: &Path, contents: &str) -> Result<(), TrainError> {
    std::fs::write(path, contents).map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

/// Full training run. Writes `metrics.csv`, `validation.csv`, `best.ckpt`,
/// `last.ckpt` and, when enabled, one checkpoint per epoch into `out_dir`.
///
/// A `context_len` of 0 in `model_cfg` is replaced by the value derived from
/// the training set; `vocab_size` is taken from the tokenizer.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &DatasetSplit,
    tokenizer: &BpeModel,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::InvalidInput("training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io { path: out_dir.display().to_string(), source })?;

    let encoded_train: Vec<Vec<u32>> = data.train.iter().map(|c| tokenizer.encode_couplet(c)).collect();
    let mut cfg = model_cfg.clone();
    cfg.vocab_size = tokenizer.vocab_size();
    if cfg.context_len == 0 {
        cfg.context_len = derive_context_len(&encoded_train.iter().map(Vec::len).collect::<Vec<_>>());
    }
    cfg.validate()?;
    let (train_seqs, too_long): (Vec<Vec<u32>>, Vec<Vec<u32>>) =
        encoded_train.into_iter().partition(|s| s.len() <= cfg.context_len);
    if train_seqs.is_empty() {
        return Err(TrainError::InvalidInput("every training couplet exceeds the context length".into()));
    }
    let val_seqs: Vec<Vec<u32>> = data
        .validation
        .iter()
        .map(|c| tokenizer.encode_couplet(c))
        .filter(|s| s.len() <= cfg.context_len)
        .collect();

    let mut params = init_model(&cfg, train_cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut metrics = TrainMetrics { skipped_too_long: too_long.len(), ..TrainMetrics::default() };
    let mut best: Option<(f64, ModelParams)> = None;
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..train_seqs.len()).collect();

    for epoch in 1..=train_cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_count = 0usize;
        for ids in order.chunks(train_cfg.batch_size) {
            let seqs: Vec<Vec<u32>> = ids.iter().map(|&i| train_seqs[i].clone()).collect();
            let batch = Batch::padded(&seqs)?;
            let step = adam.step + 1;
            let pass = Pass::Train { seed: splitmix(train_cfg.seed ^ splitmix(step)) };
            let mut lg = loss_and_grads(&params, &batch, train_cfg.smoothing, pass)
                .map_err(|e| match e {
                    ModelError::NonFinite(m) => TrainError::Divergence { step, message: m },
                    other => other.into(),
                })?;
            if let Some(c) = train_cfg.clip_grad_norm {
                let norm = lg.grads.sq_norm().sqrt();
                if norm > c {
                    lg.grads.scale(c / norm);
                }
            }
            let lr = lr_at(step, cfg.d_model, train_cfg.warmup_steps)?;
            adam_step(&mut params, &lg.grads, &mut adam, lr, train_cfg).map_err(|e| match e {
                TrainError::NonFiniteGradient { tensor } => {
                    TrainError::Divergence { step, message: format!("non-finite gradient in {tensor}") }
                }
                other => other,
            })?;
            metrics.steps.push(StepRecord { step, epoch, lr, train_loss: lg.loss });
            epoch_sum += lg.loss * lg.n_positions as f64;
            epoch_count += lg.n_positions;
        }
        if !params.all_finite() {
            return Err(TrainError::Divergence { step: adam.step, message: "parameters became non-finite".into() });
        }
        let train_loss = epoch_sum / epoch_count.max(1) as f64;
        let val_loss = if val_seqs.is_empty() {
            f64::NAN
        } else {
            evaluate_encoded(&params, &val_seqs, train_cfg.smoothing, train_cfg.batch_size)?
        };
        metrics.epochs.push(EpochRecord { epoch, train_loss, val_loss });

        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), epoch.to_string());
        meta.insert("step".to_string(), adam.step.to_string());
        meta.insert("val_loss".to_string(), val_loss.to_string());
        meta.insert("tokenizer_sha256".to_string(), crate::sha256_hex(tokenizer.to_text().as_bytes()));
        if train_cfg.epoch_checkpoints {
            let path = out_dir.join(format!("epoch-{epoch:04}.ckpt"));
            model::save_checkpoint(&path, &params, &meta)?;
            checkpoints.push(path);
        }
        let improved = match &best {
            None => true,
            Some((b, _)) => val_loss < *b || (b.is_nan() && !val_loss.is_nan()),
        };
        if improved {
            metrics.best_epoch = Some(epoch);
            model::save_checkpoint(&out_dir.join("best.ckpt"), &params, &meta)?;
            best = Some((val_loss, params.clone()));
        }
        model::save_checkpoint(&out_dir.join("last.ckpt"), &params, &meta)?;
        write_file(&out_dir.join("metrics.csv"), &metrics.steps_csv())?;
        write_file(&out_dir.join("validation.csv"), &metrics.validation_csv())?;
    }
    let best_params = best.map(|(_, p)| p).unwrap_or_else(|| params.clone());
    Ok(TrainOutcome { metrics, final_params: params, best_params, checkpoints })
}
