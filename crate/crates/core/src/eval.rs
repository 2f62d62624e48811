//! Token-level BLEU and Self-BLEU, and the diversity/quality tradeoff report.
//!
//! Sentence BLEU uses clipped n-gram precision (clip = max count over the
//! references), uniform weights, brevity penalty against the closest
//! reference length (shorter wins ties) and smoothing by adding
//! [`SMOOTHING_EPSILON`] to zero numerators. Orders for which the hypothesis
//! has no n-grams at all are left out of the geometric mean.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::Couplet;
use crate::decoding::{self, AntiLm, DecodeConfig, DecodeError, TemperatureMode};
use crate::model::ModelParams;
use crate::par;
use crate::tokenizer::{BpeModel, BOS, EOS};

pub const SMOOTHING_EPSILON: f64 = 0.1;
pub const MAX_ORDER: usize = 4;
/// Share of malformed generations above which a report row is flagged.
pub const MALFORMED_FLAG_RATE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

type Ngram = Vec<u32>;

/// N-gram multisets for orders `1..=max_n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NgramProfile {
    pub len: usize,
    pub counts: Vec<HashMap<Ngram, u32>>,
}

impl NgramProfile {
    pub fn new(tokens: &[u32], max_n: usize) -> Self {
        let counts = (1..=max_n)
            .map(|n| {
                let mut m: HashMap<Ngram, u32> = HashMap::new();
                for w in tokens.windows(n) {
                    *m.entry(w.to_vec()).or_default() += 1;
                }
                m
            })
            .collect();
        Self { len: tokens.len(), counts }
    }

    pub fn max_n(&self) -> usize {
        self.counts.len()
    }
}

/// Per-order clipped matches and hypothesis n-gram totals plus the lengths
/// feeding the brevity penalty.
#[derive(Debug, Clone, PartialEq)]
struct Components {
    matches: Vec<u64>,
    totals: Vec<u64>,
    hyp_len: usize,
    ref_len: usize,
}

impl Components {
    fn score(&self, max_n: usize) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        let mut orders = 0usize;
        for n in 0..max_n {
            if self.totals[n] == 0 {
                continue;
            }
            let num = if self.matches[n] == 0 { SMOOTHING_EPSILON } else { self.matches[n] as f64 };
            log_sum += (num / self.totals[n] as f64).ln();
            orders += 1;
        }
        let precision = if orders == 0 { 1.0 } else { (log_sum / orders as f64).exp() };
        let (c, r) = (self.hyp_len as f64, self.ref_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * precision
    }
}

fn closest_length(hyp_len: usize, ref_lens: impl Iterator<Item = usize>) -> usize {
    ref_lens
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

fn components(hyp: &NgramProfile, clip: impl Fn(usize, &Ngram) -> u32, ref_len: usize) -> Components {
    let max_n = hyp.max_n();
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    for n in 0..max_n {
        for (g, &c) in &hyp.counts[n] {
            totals[n] += c as u64;
            matches[n] += c.min(clip(n, g)) as u64;
        }
    }
    Components { matches, totals, hyp_len: hyp.len, ref_len }
}

/// Clip table over a reference set: per n-gram the largest count and the
/// second largest count, with the index of the reference holding the largest.
struct ClipTable {
    best: Vec<HashMap<Ngram, (u32, usize, u32)>>,
}

impl ClipTable {
    fn new(profiles: &[NgramProfile], max_n: usize) -> Self {
        let mut best: Vec<HashMap<Ngram, (u32, usize, u32)>> = vec![HashMap::new(); max_n];
        for (ri, p) in profiles.iter().enumerate() {
            for (table, counts) in best.iter_mut().zip(&p.counts) {
                for (g, &c) in counts {
                    let e = table.entry(g.clone()).or_insert((0, usize::MAX, 0));
                    if c > e.0 {
                        *e = (c, ri, e.0);
                    } else if c > e.2 {
                        e.2 = c;
                    }
                }
            }
        }
        Self { best }
    }

    fn max_count(&self, n: usize, g: &Ngram) -> u32 {
        self.best[n].get(g).map_or(0, |e| e.0)
    }

    /// Largest count over every reference except `skip`.
    fn max_count_excluding(&self, n: usize, g: &Ngram, skip: usize) -> u32 {
        self.best[n].get(g).map_or(0, |&(c, who, second)| if who == skip { second } else { c })
    }
}

/// Sentence BLEU of `hypothesis` against `references` with weights `1/max_n`.
/// An empty hypothesis scores 0.
pub fn bleu(hypothesis: &[u32], references: &[Vec<u32>], max_n: usize) -> Result<f64, EvalError> {
    if references.is_empty() {
        return Err(EvalError::InvalidInput("BLEU needs at least one reference".into()));
    }
    if max_n == 0 {
        return Err(EvalError::InvalidInput("max_n must be at least 1".into()));
    }
    let refs: Vec<NgramProfile> = references.iter().map(|r| NgramProfile::new(r, max_n)).collect();
    let table = ClipTable::new(&refs, max_n);
    let hyp = NgramProfile::new(hypothesis, max_n);
    let r = closest_length(hyp.len, refs.iter().map(|p| p.len));
    Ok(components(&hyp, |n, g| table.max_count(n, g), r).score(max_n))
}

/// Mean sentence BLEU of every hypothesis against the whole reference set.
pub fn corpus_bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>], max_n: usize) -> Result<f64, EvalError> {
    Ok(mean(&bleu_orders(hypotheses, references, &[max_n])?[0]))
}

/// Mean leave-one-out BLEU of each text against the rest of the set.
pub fn self_bleu(generated: &[Vec<u32>], max_n: usize) -> Result<f64, EvalError> {
    Ok(mean(&self_bleu_orders(generated, &[max_n])?[0]))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Per-hypothesis BLEU for each requested order, `[order][hypothesis]`.
fn bleu_orders(hypotheses: &[Vec<u32>], references: &[Vec<u32>], orders: &[usize]) -> Result<Vec<Vec<f64>>, EvalError> {
    if hypotheses.is_empty() {
        return Err(EvalError::InvalidInput("no hypotheses to score".into()));
    }
    if references.is_empty() {
        return Err(EvalError::InvalidInput("BLEU needs at least one reference".into()));
    }
    let max_n = check_orders(orders)?;
    let refs: Vec<NgramProfile> = par::map_slice(references, |r| NgramProfile::new(r, max_n));
    let table = ClipTable::new(&refs, max_n);
    let ref_lens: Vec<usize> = refs.iter().map(|p| p.len).collect();
    let comps = par::map_slice(hypotheses, |h| {
        let hyp = NgramProfile::new(h, max_n);
        let r = closest_length(hyp.len, ref_lens.iter().copied());
        components(&hyp, |n, g| table.max_count(n, g), r)
    });
    Ok(orders.iter().map(|&n| comps.iter().map(|c| c.score(n)).collect()).collect())
}

fn self_bleu_orders(generated: &[Vec<u32>], orders: &[usize]) -> Result<Vec<Vec<f64>>, EvalError> {
    if generated.len() < 2 {
        return Err(EvalError::InvalidInput(format!("Self-BLEU needs at least 2 texts, got {}", generated.len())));
    }
    let max_n = check_orders(orders)?;
    let profiles: Vec<NgramProfile> = par::map_slice(generated, |g| NgramProfile::new(g, max_n));
    let table = ClipTable::new(&profiles, max_n);
    let comps = par::map_range(profiles.len(), |i| {
        let hyp = &profiles[i];
        let others = profiles.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| p.len);
        let r = closest_length(hyp.len, others);
        components(hyp, |n, g| table.max_count_excluding(n, g, i), r)
    });
    Ok(orders.iter().map(|&n| comps.iter().map(|c| c.score(n)).collect()).collect())
}

fn check_orders(orders: &[usize]) -> Result<usize, EvalError> {
    match orders.iter().copied().max() {
        Some(m) if m >= 1 && !orders.contains(&0) => Ok(m),
        _ => Err(EvalError::InvalidInput("BLEU orders must be at least 1".into())),
    }
}

/// Seeded subsample of `n` references in original order; `n = 0` or
/// `n >= len` keeps them all.
pub fn subsample_references(references: &[Couplet], n: usize, seed: u64) -> Vec<Couplet> {
    if n == 0 || n >= references.len() {
        return references.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, references.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| references[i].clone()).collect()
}

/// Content tokens of an encoded couplet: BOS and EOS dropped, SEP kept.
pub fn scoring_tokens(ids: &[u32]) -> Vec<u32> {
    ids.iter().copied().filter(|&t| t != BOS && t != EOS).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub recipe: String,
    /// BLEU-2, BLEU-3, BLEU-4 against the reference set.
    pub bleu: [f64; 3],
    /// Self-BLEU-2, -3, -4 within the generated set.
    pub self_bleu: [f64; 3],
    /// Well-formed samples that were scored.
    pub n_samples: usize,
    pub n_malformed: usize,
}

impl ScoreReport {
    pub fn malformed_rate(&self) -> f64 {
        let total = self.n_samples + self.n_malformed;
        if total == 0 {
            0.0
        } else {
            self.n_malformed as f64 / total as f64
        }
    }

    pub fn flagged(&self) -> bool {
        self.malformed_rate() > MALFORMED_FLAG_RATE
    }
}

/// Scores one generated set. Both sides are token sequences as produced by
/// [`scoring_tokens`].
pub fn score_set(recipe: &str, generated: &[Vec<u32>], references: &[Vec<u32>], n_malformed: usize) -> Result<ScoreReport, EvalError> {
    let orders = [2, 3, 4];
    let b = bleu_orders(generated, references, &orders)?;
    let s = self_bleu_orders(generated, &orders)?;
    Ok(ScoreReport {
        recipe: recipe.to_string(),
        bleu: [mean(&b[0]), mean(&b[1]), mean(&b[2])],
        self_bleu: [mean(&s[0]), mean(&s[1]), mean(&s[2])],
        n_samples: generated.len(),
        n_malformed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recipe {
    pub label: String,
    pub config: DecodeConfig,
}

impl Recipe {
    pub fn new(config: DecodeConfig) -> Self {
        Self { label: config.label(), config }
    }
}

/// Ten standard decoding rows: Nucleus + Top-K at
/// four temperatures, each with and without the Anti-LM ban, then two
/// annealed schedules with the ban.
pub fn standard_recipes(max_tokens: usize, seed: u64) -> Vec<Recipe> {
    let base = DecodeConfig { max_tokens, seed, ..DecodeConfig::default() };
    let mut out = Vec::new();
    for t in [0.3, 0.5, 0.7, 0.9] {
        let fixed = TemperatureMode::Fixed { t };
        out.push(Recipe::new(DecodeConfig { temperature: fixed, anti_lm: AntiLm::Off, ..base.clone() }));
        out.push(Recipe::new(DecodeConfig { temperature: fixed, anti_lm: AntiLm::Penalty(f64::INFINITY), ..base.clone() }));
    }
    for step in [0.05, 0.2] {
        out.push(Recipe::new(DecodeConfig {
            temperature: TemperatureMode::Annealed { t0: 0.9, tf: 0.5, step },
            anti_lm: AntiLm::Penalty(f64::INFINITY),
            ..base.clone()
        }));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffReport {
    pub rows: Vec<ScoreReport>,
}

impl TradeoffReport {
    pub fn scores_csv(&self) -> String {
        let mut s = String::from("recipe,bleu2,bleu3,bleu4,sbleu2,sbleu3,sbleu4,n,malformed\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                csv_field(&r.recipe),
                r.bleu[0],
                r.bleu[1],
                r.bleu[2],
                r.self_bleu[0],
                r.self_bleu[1],
                r.self_bleu[2],
                r.n_samples,
                r.n_malformed
            );
        }
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("recipe,one_minus_bleu4,sbleu4\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6}", csv_field(&r.recipe), 1.0 - r.bleu[2], r.self_bleu[2]);
        }
        s
    }

    /// Plain-text table preceded by the scoring conventions.
    pub fn to_text(&self) -> String {
        let mut s = report_header();
        let _ = writeln!(s, "{:<48} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>6}", "recipe", "BLEU2", "BLEU3", "BLEU4", "SBLEU2", "SBLEU3", "SBLEU4", "n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<48} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>7.3} {:>6}{}",
                r.recipe,
                r.bleu[0],
                r.bleu[1],
                r.bleu[2],
                r.self_bleu[0],
                r.self_bleu[1],
                r.self_bleu[2],
                r.n_samples,
                if r.flagged() { format!("  FLAG: {} malformed", r.n_malformed) } else { String::new() }
            );
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn report_header() -> String {
    format!(
        "# n-grams: BPE token ids (BOS/EOS removed, separator kept)\n\
         # smoothing: add {SMOOTHING_EPSILON} to zero n-gram match counts\n\
         # brevity penalty: closest reference length, shorter on ties\n\
         # references: full reference set per hypothesis; Self-BLEU is leave-one-out\n"
    )
}

/// Generates `n_samples` per recipe and scores each set. Malformed samples
/// are counted and excluded.
pub fn tradeoff_report(
    params: &ModelParams,
    tokenizer: &BpeModel,
    recipes: &[Recipe],
    references: &[Couplet],
    n_samples: usize,
) -> Result<TradeoffReport, EvalError> {
    if n_samples < 2 {
        return Err(EvalError::InvalidInput("n_samples must be at least 2".into()));
    }
    if references.is_empty() {
        return Err(EvalError::InvalidInput("reference set is empty".into()));
    }
    let refs: Vec<Vec<u32>> = references.iter().map(|c| scoring_tokens(&tokenizer.encode_couplet(c))).collect();
    let mut rows = Vec::with_capacity(recipes.len());
    for recipe in recipes {
        let samples = decoding::generate_batch(params, tokenizer, &recipe.config, n_samples)?;
        rows.push(score_generations(&recipe.label, &samples, &refs)?);
    }
    Ok(TradeoffReport { rows })
}

/// Scores already generated samples; malformed ones are excluded.
pub fn score_generations(label: &str, samples: &[decoding::Generation], references: &[Vec<u32>]) -> Result<ScoreReport, EvalError> {
    let good: Vec<Vec<u32>> = samples.iter().filter(|g| !g.malformed).map(|g| scoring_tokens(&g.tokens)).collect();
    let malformed = samples.len() - good.len();
    if good.len() < 2 {
        return Err(EvalError::InvalidInput(format!(
            "recipe {label}: only {} of {} samples are well formed",
            good.len(),
            samples.len()
        )));
    }
    score_set(label, &good, references, malformed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_hypothesis_scores_one() {
        let x = vec![5, 6, 7, 8, 9, 5, 6];
        for n in 1..=4 {
            assert_eq!(bleu(&x, std::slice::from_ref(&x), n).unwrap(), 1.0);
        }
        assert_eq!(bleu(&[7], &[vec![7]], 4).unwrap(), 1.0);
    }

    #[test]
    fn identical_set_self_bleu_is_one() {
        let x = vec![1u32, 2, 3, 4, 5];
        assert_eq!(self_bleu(&vec![x; 5], 4).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_hypothesis_hits_smoothing_floor() {
        let b = bleu(&[1, 2, 3, 4, 5], &[vec![6, 7, 8, 9, 10]], 4).unwrap();
        // every order is 0.1 / count: (0.1/5 * 0.1/4 * 0.1/3 * 0.1/2)^(1/4)
        let expected = (0.1f64 / 5.0 * 0.1 / 4.0 * 0.1 / 3.0 * 0.1 / 2.0).powf(0.25);
        assert!((b - expected).abs() < 1e-15);
        assert!(b < 0.05);
    }

    #[test]
    fn disjoint_alphabets_self_bleu_is_small() {
        let texts = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 10, 11, 12]];
        let s = self_bleu(&texts, 4).unwrap();
        let expected = (0.1f64 / 4.0 * 0.1 / 3.0 * 0.1 / 2.0 * 0.1).powf(0.25);
        assert!((s - expected).abs() < 1e-15);
        assert!(s < 0.05);
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        // hypothesis length 2, references 3 and 6: r = 3
        let b = bleu(&[1, 2], &[vec![1, 2, 3], vec![1, 2, 9, 9, 9, 9]], 2).unwrap();
        assert!((b - (1.0f64 - 1.5).exp()).abs() < 1e-15);
        // equal distance to 2 and 4: shorter wins, no penalty
        assert_eq!(closest_length(3, [4, 2].into_iter()), 2);
    }

    #[test]
    fn clipping_uses_max_over_references() {
        // "the the the" against refs with 1 and 2 copies of "the": clip 2
        let b = bleu(&[1, 1, 1], &[vec![1, 2, 3], vec![1, 1, 4]], 1).unwrap();
        assert!((b - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn errors_and_empty_hypothesis() {
        assert!(bleu(&[1], &[], 4).is_err());
        assert_eq!(bleu(&[], &[vec![1]], 4).unwrap(), 0.0);
        assert!(self_bleu(&[vec![1]], 4).is_err());
    }

    #[test]
    fn self_bleu_is_order_invariant() {
        let texts = vec![vec![1, 2, 3, 1, 2], vec![2, 3, 4], vec![1, 2, 5, 6, 7, 8], vec![3, 3, 3]];
        let mut rev = texts.clone();
        rev.reverse();
        assert!((self_bleu(&texts, 4).unwrap() - self_bleu(&rev, 4).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn standard_set_has_ten_rows() {
        let r = standard_recipes(64, 0);
        assert_eq!(r.len(), 10);
        assert!(r.iter().all(|x| x.config.validate().is_ok()));
        let labels: std::collections::HashSet<_> = r.iter().map(|x| x.label.clone()).collect();
        assert_eq!(labels.len(), 10);
    }

    #[test]
    fn csv_layout() {
        let rep = TradeoffReport {
            rows: vec![ScoreReport { recipe: "a b".into(), bleu: [0.5, 0.25, 0.125], self_bleu: [1.0, 1.0, 1.0], n_samples: 3, n_malformed: 1 }],
        };
        assert_eq!(rep.scores_csv(), "recipe,bleu2,bleu3,bleu4,sbleu2,sbleu3,sbleu4,n,malformed\na b,0.500000,0.250000,0.125000,1.000000,1.000000,1.000000,3,1\n");
        assert_eq!(rep.curve_csv(), "recipe,one_minus_bleu4,sbleu4\na b,0.875000,1.000000\n");
        assert!(rep.rows[0].flagged());
    }
}
