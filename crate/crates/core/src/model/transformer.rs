use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Batch, ModelError, ModelParams};
use crate::par;
use crate::tokenizer::PAD;

const LN_EPS: f64 = 1e-5;
/// Batches are cut into at most this many contiguous row groups for the
/// gradient pass. Fixed so the summation order never depends on the pool.
const GRAD_GROUPS: usize = 8;

/// Whether dropout is active. Training passes carry the seed that drives
/// the dropout masks; row `r` of a batch draws from stream `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Eval,
    Train { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    /// Mean smoothed cross-entropy over non-PAD target positions.
    pub loss: f64,
    pub n_positions: usize,
    pub grads: ModelParams,
}

/// Standard sin/cos table, `T × d`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

struct LayerCache {
    x_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    mask1: Option<Array2<f64>>,
    xhat1: Array2<f64>,
    inv_std1: Array1<f64>,
    y: Array2<f64>,
    h_pre: Array2<f64>,
    h: Array2<f64>,
    mask2: Option<Array2<f64>>,
    xhat2: Array2<f64>,
    inv_std2: Array1<f64>,
}

struct RowOutput {
    hidden: Array2<f64>,
    layers: Vec<LayerCache>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, shape: (usize, usize), p: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row *= *inv;
    }
    let out = &xhat * gain + bias;
    (out, xhat, inv_std)
}

fn layer_norm_backward(
    dout: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dout * xhat).sum_axis(Axis(0));
    *dbias += &dout.sum_axis(Axis(0));
    let d = dout.ncols() as f64;
    let mut dx = dout * gain;
    for ((mut row, xh), &inv) in dx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
        let sum = row.sum();
        let dot = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
        Zip::from(&mut row).and(&xh).for_each(|g, &x| *g = inv / d * (d * *g - sum - x * dot));
    }
    dx
}

fn check_tokens(params: &ModelParams, tokens: &[u32]) -> Result<(), ModelError> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(ModelError::Batch("empty sequence".into()));
    }
    if tokens.len() > cfg.context_len {
        return Err(ModelError::SequenceTooLong { len: tokens.len(), context_len: cfg.context_len });
    }
    if let Some(&id) = tokens.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { id, vocab_size: cfg.vocab_size });
    }
    Ok(())
}

/// Runs the decoder stack over one sequence. Caches are kept only when
/// `keep_cache` is set.
fn forward_row(params: &ModelParams, tokens: &[u32], mut rng: Option<&mut ChaCha8Rng>, keep_cache: bool) -> RowOutput {
    let cfg = &params.config;
    let (t, d, heads, dh) = (tokens.len(), cfg.d_model, cfg.n_heads, cfg.head_dim());
    let emb_scale = (d as f64).sqrt();
    let mut x = sinusoidal_positions(t, d);
    for (mut row, &tok) in x.rows_mut().into_iter().zip(tokens) {
        row.scaled_add(emb_scale, &params.embedding.row(tok as usize));
    }
    let score_scale = 1.0 / (dh as f64).sqrt();
    let p_drop = cfg.dropout;
    let mut layers = Vec::new();
    for lp in &params.layers {
        let q = x.dot(&lp.wq);
        let k = x.dot(&lp.wk);
        let v = x.dot(&lp.wv);
        let mut ctx = Array2::zeros((t, d));
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut a = q.slice(cols).dot(&k.slice(cols).t());
            for (i, mut row) in a.rows_mut().into_iter().enumerate() {
                let max = row.iter().take(i + 1).fold(f64::NEG_INFINITY, |m, &v| m.max(v * score_scale));
                let mut sum = 0.0;
                for (j, v) in row.iter_mut().enumerate() {
                    if j > i {
                        *v = 0.0;
                    } else {
                        *v = (*v * score_scale - max).exp();
                        sum += *v;
                    }
                }
                row /= sum;
            }
            ctx.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            attn.push(a);
        }
        let mut attn_out = ctx.dot(&lp.wo);
        let mask1 = match rng.as_deref_mut() {
            Some(r) if p_drop > 0.0 => Some(dropout_mask(r, (t, d), p_drop)),
            _ => None,
        };
        if let Some(m) = &mask1 {
            attn_out *= m;
        }
        let (y, xhat1, inv_std1) = layer_norm(&(&x + &attn_out), &lp.ln1_gain, &lp.ln1_bias);
        let h_pre = y.dot(&lp.w1) + &lp.b1;
        let h = h_pre.mapv(|v| v.max(0.0));
        let mut ffn_out = h.dot(&lp.w2) + &lp.b2;
        let mask2 = match rng.as_deref_mut() {
            Some(r) if p_drop > 0.0 => Some(dropout_mask(r, (t, d), p_drop)),
            _ => None,
        };
        if let Some(m) = &mask2 {
            ffn_out *= m;
        }
        let (out, xhat2, inv_std2) = layer_norm(&(&y + &ffn_out), &lp.ln2_gain, &lp.ln2_bias);
        if keep_cache {
            layers.push(LayerCache {
                x_in: x,
                q,
                k,
                v,
                attn,
                ctx,
                mask1,
                xhat1,
                inv_std1,
                y,
                h_pre,
                h,
                mask2,
                xhat2,
                inv_std2,
            });
        }
        x = out;
    }
    RowOutput { hidden: x, layers }
}

fn project(params: &ModelParams, hidden: &Array2<f64>) -> Array2<f64> {
    match &params.output {
        Some(w) => hidden.dot(w),
        None => hidden.dot(&params.embedding.t()),
    }
}

fn row_rng(pass: Pass, row: usize) -> Option<ChaCha8Rng> {
    match pass {
        Pass::Eval => None,
        Pass::Train { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(row as u64);
            Some(rng)
        }
    }
}

/// Logits `B × T × |V|`.
pub fn forward(params: &ModelParams, batch: &Batch, pass: Pass) -> Result<Array3<f64>, ModelError> {
    batch.validate_for(&params.config)?;
    let rows = par::map_range(batch.batch_size(), |r| {
        let mut rng = row_rng(pass, r);
        let out = forward_row(params, &batch.rows()[r], rng.as_mut(), false);
        project(params, &out.hidden)
    });
    let (b, t, v) = (batch.batch_size(), batch.seq_len(), params.config.vocab_size);
    let mut logits = Array3::zeros((b, t, v));
    for (mut dst, src) in logits.outer_iter_mut().zip(rows) {
        dst.assign(&src);
    }
    Ok(logits)
}

/// Attention probabilities of one sequence, indexed `[layer][head]`, each
/// `T × T` with zeros above the diagonal.
pub fn attention_weights(params: &ModelParams, tokens: &[u32]) -> Result<Vec<Vec<Array2<f64>>>, ModelError> {
    check_tokens(params, tokens)?;
    let out = forward_row(params, tokens, None, true);
    Ok(out.layers.into_iter().map(|l| l.attn).collect())
}

/// Logits for the position after `prefix`, dropout off.
pub fn next_token_logits(params: &ModelParams, prefix: &[u32]) -> Result<Vec<f64>, ModelError> {
    check_tokens(params, prefix)?;
    let out = forward_row(params, prefix, None, false);
    let last = out.hidden.slice(s![out.hidden.nrows() - 1.., ..]).to_owned();
    Ok(project(params, &last).into_raw_vec_and_offset().0)
}

/// Sum of smoothed cross-entropy over non-PAD targets, the target count, and
/// optionally `dL/dlogits` for that sum.
fn row_loss(logits: &Array2<f64>, tokens: &[u32], smoothing: f64, want_grad: bool) -> (f64, usize, Option<Array2<f64>>) {
    let v = logits.ncols();
    let uniform = smoothing / v as f64;
    let mut dlogits = want_grad.then(|| Array2::zeros(logits.raw_dim()));
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..tokens.len().saturating_sub(1) {
        let target = tokens[i + 1];
        if target == PAD {
            continue;
        }
        let row = logits.row(i);
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let sum_logp: f64 = row.iter().map(|&x| x - lse).sum();
        let logp_target = row[target as usize] - lse;
        total += -(1.0 - smoothing) * logp_target - uniform * sum_logp;
        count += 1;
        if let Some(g) = dlogits.as_mut() {
            let mut grow = g.row_mut(i);
            Zip::from(&mut grow).and(&row).for_each(|gv, &x| *gv = (x - lse).exp() - uniform);
            grow[target as usize] -= 1.0 - smoothing;
        }
    }
    (total, count, dlogits)
}

fn backward_row(params: &ModelParams, tokens: &[u32], cache: &RowOutput, dlogits: &Array2<f64>, g: &mut ModelParams) {
    let cfg = &params.config;
    let (t, d, dh) = (tokens.len(), cfg.d_model, cfg.head_dim());
    let hidden = &cache.hidden;
    let mut dx = match (&params.output, g.output.as_mut()) {
        (Some(w), Some(gw)) => {
            *gw += &hidden.t().dot(dlogits);
            dlogits.dot(&w.t())
        }
        _ => {
            g.embedding += &dlogits.t().dot(hidden);
            dlogits.dot(&params.embedding)
        }
    };
    let score_scale = 1.0 / (dh as f64).sqrt();
    for (li, (lp, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let lg = &mut g.layers[li];
        let dr2 = layer_norm_backward(&dx, &lc.xhat2, &lc.inv_std2, &lp.ln2_gain, &mut lg.ln2_gain, &mut lg.ln2_bias);
        let df = match &lc.mask2 {
            Some(m) => &dr2 * m,
            None => dr2.clone(),
        };
        let mut dy = dr2;
        lg.w2 += &lc.h.t().dot(&df);
        lg.b2 += &df.sum_axis(Axis(0));
        let mut dh_pre = df.dot(&lp.w2.t());
        Zip::from(&mut dh_pre).and(&lc.h_pre).for_each(|gv, &p| {
            if p <= 0.0 {
                *gv = 0.0;
            }
        });
        lg.w1 += &lc.y.t().dot(&dh_pre);
        lg.b1 += &dh_pre.sum_axis(Axis(0));
        dy += &dh_pre.dot(&lp.w1.t());

        let dr1 = layer_norm_backward(&dy, &lc.xhat1, &lc.inv_std1, &lp.ln1_gain, &mut lg.ln1_gain, &mut lg.ln1_bias);
        let da = match &lc.mask1 {
            Some(m) => &dr1 * m,
            None => dr1.clone(),
        };
        let mut dx_in = dr1;
        lg.wo += &lc.ctx.t().dot(&da);
        let dctx = da.dot(&lp.wo.t());
        let mut dq = Array2::zeros((t, d));
        let mut dk = Array2::zeros((t, d));
        let mut dv = Array2::zeros((t, d));
        for (h, a) in lc.attn.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx_h = dctx.slice(cols);
            let mut ds = dctx_h.dot(&lc.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dctx_h));
            for (mut drow, arow) in ds.rows_mut().into_iter().zip(a.rows()) {
                let dot: f64 = drow.iter().zip(arow).map(|(x, y)| x * y).sum();
                Zip::from(&mut drow).and(&arow).for_each(|gv, &p| *gv = p * (*gv - dot) * score_scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        lg.wq += &lc.x_in.t().dot(&dq);
        lg.wk += &lc.x_in.t().dot(&dk);
        lg.wv += &lc.x_in.t().dot(&dv);
        dx_in += &dq.dot(&lp.wq.t());
        dx_in += &dk.dot(&lp.wk.t());
        dx_in += &dv.dot(&lp.wv.t());
        dx = dx_in;
    }
    let emb_scale = (d as f64).sqrt();
    for (i, &tok) in tokens.iter().enumerate() {
        g.embedding.row_mut(tok as usize).scaled_add(emb_scale, &dx.row(i));
    }
}

fn check_smoothing(smoothing: f64) -> Result<(), ModelError> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(ModelError::Config(format!("label smoothing must lie in [0, 1), got {smoothing}")));
    }
    Ok(())
}

/// Mean label-smoothed cross-entropy over non-PAD targets and its exact
/// gradient. The smoothed target is `(1 - eps) * one_hot + eps / |V|`.
pub fn loss_and_grads(params: &ModelParams, batch: &Batch, smoothing: f64, pass: Pass) -> Result<LossAndGrads, ModelError> {
    batch.validate_for(&params.config)?;
    check_smoothing(smoothing)?;
    let b = batch.batch_size();
    let n_groups = b.min(GRAD_GROUPS);
    let bounds = |g: usize| (g * b / n_groups, (g + 1) * b / n_groups);
    let partials = par::map_range(n_groups, |g| {
        let (lo, hi) = bounds(g);
        let mut grads = params.zeros_like();
        let mut sum = 0.0;
        let mut count = 0;
        for r in lo..hi {
            let tokens = &batch.rows()[r];
            let mut rng = row_rng(pass, r);
            let out = forward_row(params, tokens, rng.as_mut(), true);
            let logits = project(params, &out.hidden);
            let (s, c, dlogits) = row_loss(&logits, tokens, smoothing, true);
            sum += s;
            count += c;
            if c > 0 {
                backward_row(params, tokens, &out, &dlogits.expect("requested"), &mut grads);
            }
        }
        (sum, count, grads)
    });
    let mut iter = partials.into_iter();
    let (mut sum, mut count, mut grads) = iter.next().expect("at least one group");
    for (s, c, g) in iter {
        sum += s;
        count += c;
        grads.add_scaled(&g, 1.0);
    }
    if count == 0 {
        return Err(ModelError::Batch("batch has no non-PAD target positions".into()));
    }
    let loss = sum / count as f64;
    if !loss.is_finite() {
        return Err(ModelError::NonFinite(format!("loss evaluated to {loss}")));
    }
    grads.scale(1.0 / count as f64);
    Ok(LossAndGrads { loss, n_positions: count, grads })
}

/// Summed smoothed cross-entropy and target count over a batch, dropout off.
pub fn evaluate_batch(params: &ModelParams, batch: &Batch, smoothing: f64) -> Result<(f64, usize), ModelError> {
    batch.validate_for(&params.config)?;
    check_smoothing(smoothing)?;
    let per_row = par::map_slice(batch.rows(), |tokens| {
        let out = forward_row(params, tokens, None, false);
        let (s, c, _) = row_loss(&project(params, &out.hidden), tokens, smoothing, false);
        (s, c)
    });
    Ok(per_row.into_iter().fold((0.0, 0), |(s, c), (rs, rc)| (s + rs, c + rc)))
}

/// Entropy of the smoothed target distribution, the floor of the loss.
pub fn smoothed_target_entropy(vocab_size: usize, smoothing: f64) -> f64 {
    let v = vocab_size as f64;
    let off = smoothing / v;
    let on = 1.0 - smoothing + off;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(on) + (v - 1.0) * term(off)
}
