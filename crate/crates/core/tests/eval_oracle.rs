use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use versegen::eval::{bleu, corpus_bleu, score_set, self_bleu, SMOOTHING_EPSILON};

const FIXTURES: usize = 50;

fn count(seq: &[u32], gram: &[u32]) -> u32 {
    let n = gram.len();
    if seq.len() < n {
        return 0;
    }
    (0..=seq.len() - n).filter(|&i| &seq[i..i + n] == gram).count() as u32
}

/// Sentence BLEU from the textbook definition, every count found by scanning.
fn oracle_bleu(hyp: &[u32], refs: &[Vec<u32>], max_n: usize) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut used = 0;
    for n in 1..=max_n {
        if hyp.len() < n {
            continue;
        }
        let mut seen: Vec<&[u32]> = Vec::new();
        let mut matched = 0u32;
        for i in 0..=hyp.len() - n {
            let g = &hyp[i..i + n];
            if seen.contains(&g) {
                continue;
            }
            seen.push(g);
            let clip = refs.iter().map(|r| count(r, g)).max().unwrap();
            matched += count(hyp, g).min(clip);
        }
        let total = (hyp.len() - n + 1) as f64;
        let num = if matched == 0 { SMOOTHING_EPSILON } else { matched as f64 };
        log_sum += (num / total).ln();
        used += 1;
    }
    let mut best = refs[0].len();
    for r in refs {
        let (d, bd) = (r.len().abs_diff(hyp.len()), best.abs_diff(hyp.len()));
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    let (c, r) = (hyp.len() as f64, best as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / used as f64).exp()
}

fn oracle_self_bleu(texts: &[Vec<u32>], max_n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..texts.len() {
        let others: Vec<Vec<u32>> = texts.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| t.clone()).collect();
        total += oracle_bleu(&texts[i], &others, max_n);
    }
    total / texts.len() as f64
}

/// Small alphabet so n-grams collide often.
fn random_text(rng: &mut ChaCha8Rng) -> Vec<u32> {
    let len = rng.random_range(1..14);
    let alphabet = rng.random_range(2..7);
    (0..len).map(|_| rng.random_range(0..alphabet)).collect()
}

fn random_set(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<Vec<u32>> {
    (0..rng.random_range(lo..hi)).map(|_| random_text(rng)).collect()
}

#[test]
fn sentence_bleu_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..FIXTURES {
        let refs = random_set(&mut rng, 1, 6);
        let hyp = random_text(&mut rng);
        for n in 1..=4 {
            let got = bleu(&hyp, &refs, n).unwrap();
            let want = oracle_bleu(&hyp, &refs, n);
            assert!((got - want).abs() <= 1e-9, "hyp={hyp:?} refs={refs:?} n={n}: {got} vs {want}");
        }
    }
}

#[test]
fn corpus_and_self_bleu_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..FIXTURES {
        let hyps = random_set(&mut rng, 2, 9);
        let refs = random_set(&mut rng, 1, 6);
        for n in 1..=4 {
            let want = hyps.iter().map(|h| oracle_bleu(h, &refs, n)).sum::<f64>() / hyps.len() as f64;
            assert!((corpus_bleu(&hyps, &refs, n).unwrap() - want).abs() <= 1e-9);
            let got = self_bleu(&hyps, n).unwrap();
            let want = oracle_self_bleu(&hyps, n);
            assert!((got - want).abs() <= 1e-9, "set={hyps:?} n={n}: {got} vs {want}");
        }
    }
}

#[test]
fn score_set_reports_three_orders() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let hyps = random_set(&mut rng, 5, 6);
    let refs = random_set(&mut rng, 4, 5);
    let report = score_set("x", &hyps, &refs, 1).unwrap();
    for (i, n) in [2, 3, 4].into_iter().enumerate() {
        assert!((report.bleu[i] - corpus_bleu(&hyps, &refs, n).unwrap()).abs() <= 1e-12);
        assert!((report.self_bleu[i] - self_bleu(&hyps, n).unwrap()).abs() <= 1e-12);
    }
    assert_eq!(report.n_samples, 5);
    assert!(report.flagged());
}

#[test]
fn self_bleu_of_identical_set_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..FIXTURES {
        let x = random_text(&mut rng);
        let set = vec![x.clone(); rng.random_range(2..6)];
        assert!((self_bleu(&set, 4).unwrap() - 1.0).abs() <= 1e-12);
        assert!((bleu(&x, std::slice::from_ref(&x), 4).unwrap() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn scores_are_thread_count_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let hyps = random_set(&mut rng, 40, 41);
    let refs = random_set(&mut rng, 30, 31);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| score_set("x", &hyps, &refs, 0).unwrap())
    };
    assert_eq!(run(1), run(4));
}
