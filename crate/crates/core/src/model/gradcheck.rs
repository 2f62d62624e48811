use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{loss_and_grads, Batch, ModelConfig, ModelError, ModelParams, Pass};
use crate::tokenizer::{BOS, N_SPECIALS};

const STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so coordinates whose gradient
/// is numerically zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tensors {
            let status = if t.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!("{:<16} coords={:<4} max_rel_err={:.3e} {status}\n", t.name, t.checked, t.max_rel_error));
        }
        s.push_str(&format!(
            "overall max_rel_err={:.3e} tolerance={:.1e} {}\n",
            self.max_rel_error(),
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        s
    }
}

/// `rows` sequences of length `len` (capped at the context window): BOS
/// followed by uniformly drawn non-special ids.
pub fn random_batch(config: &ModelConfig, rows: usize, len: usize, seed: u64) -> Result<Batch, ModelError> {
    let len = len.min(config.context_len).max(2);
    if config.vocab_size <= N_SPECIALS {
        return Err(ModelError::Config("vocabulary has no regular tokens".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = (0..rows)
        .map(|_| {
            std::iter::once(BOS)
                .chain((1..len).map(|_| rng.random_range(N_SPECIALS as u32..config.vocab_size as u32)))
                .collect()
        })
        .collect();
    Batch::new(seqs)
}

fn loss_at(params: &ModelParams, batch: &Batch, smoothing: f64) -> Result<f64, ModelError> {
    let l = loss_and_grads(params, batch, smoothing, Pass::Eval)?.loss;
    if !l.is_finite() {
        return Err(ModelError::NonFinite(format!("loss {l} during gradient check")));
    }
    Ok(l)
}

/// Central-difference check of the analytic gradient on a random subsample
/// of `coords_per_tensor` coordinates per tensor (all coordinates for
/// smaller tensors). Dropout is off.
pub fn gradient_check(
    params: &ModelParams,
    batch: &Batch,
    smoothing: f64,
    tolerance: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    gradient_check_with(params, batch, smoothing, tolerance, coords_per_tensor, seed, |p| {
        Ok(loss_and_grads(p, batch, smoothing, Pass::Eval)?.grads)
    })
}

/// Same as [`gradient_check`] with a caller-supplied analytic gradient.
pub fn gradient_check_with<F>(
    params: &ModelParams,
    batch: &Batch,
    smoothing: f64,
    tolerance: f64,
    coords_per_tensor: usize,
    seed: u64,
    analytic: F,
) -> Result<GradCheckReport, ModelError>
where
    F: Fn(&ModelParams) -> Result<ModelParams, ModelError>,
{
    loss_at(params, batch, smoothing)?;
    let grads = analytic(params)?;
    let grad_tensors: Vec<Vec<f64>> = grads.tensors().into_iter().map(|(_, d, _)| d.to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = Vec::new();
    for (ti, (name, data, _)) in params.tensors().into_iter().enumerate() {
        let n = data.len();
        let coords: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let mut max_rel: f64 = 0.0;
        for &c in &coords {
            let original = data[c];
            work.tensors_mut()[ti][c] = original + STEP;
            let plus = loss_at(&work, batch, smoothing)?;
            work.tensors_mut()[ti][c] = original - STEP;
            let minus = loss_at(&work, batch, smoothing)?;
            work.tensors_mut()[ti][c] = original;
            let numeric = (plus - minus) / (2.0 * STEP);
            let exact = grad_tensors[ti][c];
            let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
        }
        report.push(TensorCheck { name, checked: coords.len(), max_rel_error: max_rel });
    }
    let passed = report.iter().all(|t| t.max_rel_error < tolerance);
    Ok(GradCheckReport { tensors: report, tolerance, passed })
}

/// Analytic and central-difference directional derivatives along `direction`.
pub fn directional_check(
    params: &ModelParams,
    batch: &Batch,
    smoothing: f64,
    direction: &ModelParams,
) -> Result<(f64, f64), ModelError> {
    let grads = loss_and_grads(params, batch, smoothing, Pass::Eval)?.grads;
    let analytic: f64 = grads
        .tensors()
        .iter()
        .zip(direction.tensors())
        .map(|((_, g, _), (_, d, _))| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let mut plus = params.clone();
    plus.add_scaled(direction, STEP);
    let mut minus = params.clone();
    minus.add_scaled(direction, -STEP);
    let numeric = (loss_at(&plus, batch, smoothing)? - loss_at(&minus, batch, smoothing)?) / (2.0 * STEP);
    Ok((analytic, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::tokenizer::PAD;

    fn setup(tie: bool) -> (ModelParams, Batch) {
        let cfg = ModelConfig { tie_embeddings: tie, ..ModelConfig::grad_check_tiny() };
        let p = init_model(&cfg, 11).unwrap();
        let batch = Batch::new(vec![vec![0, 5, 9, 2, 7], vec![0, 4, 4, 1, PAD]]).unwrap();
        (p, batch)
    }

    #[test]
    fn tiny_model_passes() {
        let (p, batch) = setup(false);
        let report = gradient_check(&p, &batch, 0.1, 1e-4, 20, 0).unwrap();
        assert!(report.passed, "{}", report.to_text());
    }

    #[test]
    fn tied_model_passes() {
        let (p, batch) = setup(true);
        let report = gradient_check(&p, &batch, 0.1, 1e-4, 20, 0).unwrap();
        assert!(report.passed, "{}", report.to_text());
    }

    #[test]
    fn zero_direction_gives_zero_deltas() {
        let (p, batch) = setup(false);
        let (a, n) = directional_check(&p, &batch, 0.1, &p.zeros_like()).unwrap();
        assert_eq!((a, n), (0.0, 0.0));
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (p, batch) = setup(false);
        let report = gradient_check_with(&p, &batch, 0.1, 1e-4, 20, 0, |q| {
            let mut g = loss_and_grads(q, &batch, 0.1, Pass::Eval)?.grads;
            g.scale(2.0);
            Ok(g)
        })
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error() > 0.1);
    }

    #[test]
    fn non_finite_parameters_abort() {
        let (mut p, batch) = setup(false);
        p.output.as_mut().unwrap()[[0, 0]] = f64::NAN;
        assert!(matches!(gradient_check(&p, &batch, 0.1, 1e-4, 20, 0), Err(ModelError::NonFinite(_))));
    }
}
