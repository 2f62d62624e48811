//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Pipeline criteria drive the `versegen` binary on the tiny preset;
//! the rest compare library results against independent oracles.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use versegen::corpus::{parse_poem_records, split_into_couplets};
use versegen::decoding::{apply_temperature, nucleus_filter, top_k_filter, top_k_probs, LogitVector};
use versegen::eval::{bleu, self_bleu, standard_recipes, SMOOTHING_EPSILON};
use versegen::tokenizer::BpeModel;
use versegen::trainer::lr_at;

type Outcome = Result<String, String>;

const BUNDLED: &str = include_str!("../../../data/sample_poems.jsonl");

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn versegen(args: &[&str]) -> Result<Duration, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_versegen")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("`versegen {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(start.elapsed())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Result<String, String> {
    std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// One full tiny-preset pipeline run rooted at `dir`.
struct Pipeline {
    dir: PathBuf,
    train_time: Duration,
}

impl Pipeline {
    fn run(dir: &Path, extra: &[&str]) -> Result<Self, String> {
        let p = |x: &str| dir.join(x);
        let with = |args: &[&str]| -> Vec<String> {
            extra.iter().chain(["--preset", "tiny"].iter()).chain(args).map(|x| x.to_string()).collect()
        };
        let call = |args: Vec<String>| versegen(&args.iter().map(String::as_str).collect::<Vec<_>>());
        call(with(&["prepare", "--out", s(&p("data"))]))?;
        call(with(&["tokenize", "--data", s(&p("data")), "--out", s(&p("tok"))]))?;
        let train_time = call(with(&[
            "train",
            "--data",
            s(&p("data")),
            "--tokenizer",
            s(&p("tok/tokenizer.bpe")),
            "--out",
            s(&p("run")),
        ]))?;
        call(with(&["generate", "--checkpoint", s(&p("run/last.ckpt")), "--n-samples", "100", "--trace"]))?;
        call(with(&[
            "generate",
            "--checkpoint",
            s(&p("run/last.ckpt")),
            "--out",
            s(&p("annealed")),
            "--t0",
            "0.9",
            "--tf",
            "0.5",
            "--anneal-step",
            "0.05",
            "--n-samples",
            "20",
            "--trace",
        ]))?;
        call(with(&[
            "eval",
            "--references",
            s(&p("data/validation.jsonl")),
            "--checkpoint",
            s(&p("run/best.ckpt")),
            "--recipes",
            "standard",
            "--out",
            s(&p("eval")),
        ]))?;
        Ok(Self { dir: dir.to_path_buf(), train_time })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn samples(&self, rel: &str) -> Result<Vec<serde_json::Value>, String> {
        read(&self.path(rel))?
            .lines()
            .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
            .collect()
    }
}

fn gradient_correctness(work: &Path) -> Outcome {
    let out = work.join("check-grads");
    let elapsed = versegen(&["check-grads", "--preset", "tiny", "--out", s(&out)])?;
    let report = read(&out.join("gradcheck.txt"))?;
    let overall = report.lines().find(|l| l.starts_with("overall")).ok_or("no overall line")?;
    let err: f64 = overall
        .split_whitespace()
        .find_map(|w| w.strip_prefix("max_rel_err="))
        .and_then(|v| v.parse().ok())
        .ok_or("unparseable report")?;
    ensure(err < 1e-4, || format!("max relative error {err:e}"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!("max rel err {err:.2e}, {:.1}s", elapsed.as_secs_f64()))
}

fn schedule_fidelity() -> Outcome {
    let (d, w) = (512usize, 4000u64);
    let closed = |step: u64| (d as f64).powf(-0.5) * (step as f64).powf(-0.5).min(step as f64 * (w as f64).powf(-1.5));
    for step in [1, 2000, 4000, 8000, 40000] {
        let got = lr_at(step, d, w).map_err(|e| e.to_string())?;
        let want = closed(step);
        ensure(((got - want) / want).abs() <= 1e-9, || format!("step {step}: {got} vs {want}"))?;
    }
    let peak = lr_at(w, d, w).map_err(|e| e.to_string())?;
    let neighbours = [lr_at(w - 1, d, w), lr_at(w + 1, d, w)];
    for n in neighbours {
        let n = n.map_err(|e| e.to_string())?;
        ensure(n < peak, || format!("neighbour {n} not below peak {peak}"))?;
    }
    ensure((peak - 6.988e-4).abs() <= 1e-7, || format!("peak {peak}"))?;
    Ok(format!("peak {peak:.4e} at step {w}"))
}

fn brute_top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; values.len()];
    for _ in 0..k.min(values.len()) {
        let mut best = None;
        for i in 0..values.len() {
            if !taken[i] && best.is_none_or(|b: usize| values[i] > values[b]) {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
    }
    (0..values.len()).filter(|&i| taken[i]).collect()
}

fn brute_nucleus(probs: &[f64], p: f64) -> Vec<usize> {
    let support = probs.iter().filter(|&&x| x > 0.0).count();
    if p < 1.0 {
        for m in 1..=support {
            let kept = brute_top_k(probs, m);
            if kept.iter().map(|&i| probs[i]).sum::<f64>() >= p {
                return kept;
            }
        }
    }
    (0..probs.len()).filter(|&i| probs[i] > 0.0).collect()
}

fn filter_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let n = rng.random_range(1..=64);
        let mut u: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        if n > 4 && trial % 3 == 0 {
            u[n - 1] = u[0];
        }
        let lv = LogitVector::new(u.clone()).map_err(|e| e.to_string())?;
        let probs = apply_temperature(&lv, rng.random_range(0.2..2.0)).map_err(|e| e.to_string())?;
        let k = rng.random_range(1..=n);
        let kept_logits: Vec<usize> = {
            let f = top_k_filter(&lv, k).map_err(|e| e.to_string())?;
            (0..n).filter(|&i| !f.is_masked(i)).collect()
        };
        let want = brute_top_k(&u, k);
        ensure(kept_logits == want, || format!("top-k kept set differs for k={k}"))?;
        let topk = top_k_probs(&probs, k).map_err(|e| e.to_string())?;
        let want = brute_top_k(&probs, k);
        let mass: f64 = want.iter().map(|&i| probs[i]).sum();
        for i in 0..n {
            let expect = if want.contains(&i) { probs[i] / mass } else { 0.0 };
            worst = worst.max((topk[i] - expect).abs());
        }
        let p = if trial % 10 == 0 { 1.0 } else { rng.random_range(0.05..1.0) };
        let nuc = nucleus_filter(&probs, p).map_err(|e| e.to_string())?;
        let want = brute_nucleus(&probs, p);
        let got: Vec<usize> = (0..n).filter(|&i| nuc[i] > 0.0).collect();
        ensure(got == want, || format!("nucleus kept set differs for p={p}"))?;
        let mass: f64 = want.iter().map(|&i| probs[i]).sum();
        for i in 0..n {
            let expect = if want.contains(&i) { probs[i] / mass } else { 0.0 };
            worst = worst.max((nuc[i] - expect).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("probability error {worst:e}"))?;
    let two = apply_temperature(&LogitVector::new(vec![2.0, 0.0]).unwrap(), 1.0).map_err(|e| e.to_string())?;
    ensure((two[0] - 0.880797).abs() <= 1e-6 && (two[1] - 0.119203).abs() <= 1e-6, || format!("softmax {two:?}"))?;
    Ok(format!("1000 distributions, worst prob error {worst:.1e}"))
}

fn annealing(run: &Pipeline) -> Outcome {
    let mut longest = 0;
    for r in run.samples("annealed/samples.jsonl")? {
        let temps = r["trace"]["temperatures"].as_array().ok_or("missing trace")?;
        longest = longest.max(temps.len());
        for (i, t) in temps.iter().take(30).enumerate() {
            let want = 0.5f64.max(0.9 - 0.05 * i as f64);
            ensure(t.as_f64() == Some(want), || format!("step {i}: {t} vs {want}"))?;
        }
    }
    ensure(longest >= 30, || format!("longest trace has only {longest} steps"))?;
    Ok(format!("20 traces, longest {longest} steps"))
}

fn anti_lm_guarantee(run: &Pipeline) -> Outcome {
    let records = run.samples("run/generated/samples.jsonl")?;
    ensure(records.len() == 100, || format!("{} samples", records.len()))?;
    let mut skips = 0;
    for r in &records {
        skips += r["trace"]["skip_events"].as_array().ok_or("missing trace")?.len();
        let mut seq = vec![0u64];
        seq.extend(r["tokens"].as_array().ok_or("missing tokens")?.iter().filter_map(|t| t.as_u64()));
        let mut seen = Vec::new();
        for w in seq.windows(2) {
            ensure(!seen.contains(&(w[0], w[1])), || format!("repeated bigram {w:?}"))?;
            seen.push((w[0], w[1]));
        }
    }
    ensure(skips == 0, || format!("{skips} skip events"))?;
    Ok("100 samples, 0 repeated bigrams, 0 skip events".into())
}

fn overfit(run: &Pipeline) -> Outcome {
    let summary = key_values(&read(&run.path("run/summary.txt"))?);
    let loss: f64 = summary
        .get("final_train_loss_unsmoothed")
        .and_then(|v| v.parse().ok())
        .ok_or("summary lacks final_train_loss_unsmoothed")?;
    ensure(loss < 0.1, || format!("unsmoothed loss {loss}"))?;
    ensure(run.train_time < Duration::from_secs(600), || format!("took {:?}", run.train_time))?;
    Ok(format!("unsmoothed loss {loss:.4} after {} steps, {:.1}s", summary["steps"], run.train_time.as_secs_f64()))
}

fn count(seq: &[u32], g: &[u32]) -> u32 {
    seq.windows(g.len()).filter(|w| *w == g).count() as u32
}

fn oracle_bleu(hyp: &[u32], refs: &[Vec<u32>], max_n: usize) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let (mut log_sum, mut used) = (0.0, 0);
    for n in 1..=max_n.min(hyp.len()) {
        let grams: Vec<&[u32]> = hyp.windows(n).collect();
        let mut matched = 0;
        for (i, g) in grams.iter().enumerate() {
            if grams[..i].contains(g) {
                continue;
            }
            let clip = refs.iter().map(|r| count(r, g)).max().unwrap_or(0);
            matched += count(hyp, g).min(clip);
        }
        let num = if matched == 0 { SMOOTHING_EPSILON } else { matched as f64 };
        log_sum += (num / grams.len() as f64).ln();
        used += 1;
    }
    let r = refs.iter().map(Vec::len).min_by_key(|&r| (r.abs_diff(hyp.len()), r)).unwrap();
    let bp = if hyp.len() > r { 1.0 } else { (1.0 - r as f64 / hyp.len() as f64).exp() };
    bp * (log_sum / used as f64).exp()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let text = |rng: &mut ChaCha8Rng| -> Vec<u32> {
        let a = rng.random_range(2..6);
        (0..rng.random_range(1..12)).map(|_| rng.random_range(0..a)).collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let set: Vec<Vec<u32>> = (0..rng.random_range(2..7)).map(|_| text(&mut rng)).collect();
        let hyp = text(&mut rng);
        for n in 1..=4 {
            worst = worst.max((bleu(&hyp, &set, n).map_err(|e| e.to_string())? - oracle_bleu(&hyp, &set, n)).abs());
            let want = (0..set.len())
                .map(|i| {
                    let others: Vec<Vec<u32>> = set.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, t)| t.clone()).collect();
                    oracle_bleu(&set[i], &others, n)
                })
                .sum::<f64>()
                / set.len() as f64;
            worst = worst.max((self_bleu(&set, n).map_err(|e| e.to_string())? - want).abs());
        }
        ensure(bleu(&hyp, std::slice::from_ref(&hyp), 4).ok() == Some(1.0), || format!("BLEU(x,{{x}}) != 1 for {hyp:?}"))?;
        ensure(self_bleu(&vec![hyp.clone(); 3], 4).ok() == Some(1.0), || format!("identical Self-BLEU != 1 for {hyp:?}"))?;
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("50 fixtures, max deviation {worst:.1e}"))
}

fn trend(run: &Pipeline) -> Outcome {
    let csv = read(&run.path("eval/scores.csv"))?;
    let mut rows = csv.lines();
    let header: Vec<&str> = rows.next().ok_or("empty scores.csv")?.split(',').collect();
    let col = header.iter().position(|h| *h == "sbleu4").ok_or("no sbleu4 column")?;
    let n_col = header.iter().position(|h| *h == "n").ok_or("no n column")?;
    let bad_col = header.iter().position(|h| *h == "malformed").ok_or("no malformed column")?;
    let mut by_label = BTreeMap::new();
    for line in rows {
        let fields: Vec<&str> = line.split(',').collect();
        let total = fields[n_col].parse::<usize>().unwrap_or(0) + fields[bad_col].parse::<usize>().unwrap_or(0);
        ensure(total == 200, || format!("row generated {total} samples"))?;
        by_label.insert(fields[0].trim_matches('"').to_string(), fields[col].parse::<f64>().map_err(|e| e.to_string())?);
    }
    let recipes = standard_recipes(128, 0);
    ensure(by_label.len() == recipes.len(), || format!("{} rows", by_label.len()))?;
    let score = |i: usize| by_label.get(&recipes[i].label).copied().ok_or(format!("missing row {}", recipes[i].label));
    // Rows alternate plain / Anti-LM for t = 0.3, 0.5, 0.7, 0.9.
    let plain = [score(0)?, score(2)?, score(4)?, score(6)?];
    let anti = [score(1)?, score(3)?, score(5)?, score(7)?];
    ensure(plain.windows(2).all(|w| w[1] < w[0]), || format!("plain Self-BLEU4 not decreasing: {plain:?}"))?;
    ensure(anti[2] <= plain[2] && anti[3] <= plain[3], || format!("Anti-LM raised Self-BLEU4: {anti:?} vs {plain:?}"))?;
    Ok(format!(
        "Self-BLEU4 {:.3} > {:.3} > {:.3} > {:.3}; Anti-LM {:.3} <= {:.3}, {:.3} <= {:.3}",
        plain[0], plain[1], plain[2], plain[3], anti[2], plain[2], anti[3], plain[3]
    ))
}

fn tokenizer_checks(run: &Pipeline, work: &Path) -> Outcome {
    let tok = BpeModel::load(&run.path("tok/tokenizer.bpe")).map_err(|e| e.to_string())?;
    let mut strings: Vec<String> = Vec::new();
    for poem in parse_poem_records(BUNDLED).poems {
        strings.push(poem.title.clone());
        strings.extend(poem.body.lines().flat_map(|l| l.split('\t')).map(str::to_string));
        for c in split_into_couplets(&poem, "\t").couplets {
            strings.push(c.first);
            strings.push(c.second);
        }
    }
    for text in &strings {
        let back = tok.decode(&tok.encode(text)).map_err(|e| e.to_string())?;
        ensure(&back == text, || format!("round trip changed {text:?} into {back:?}"))?;
    }
    let out = work.join("sweep");
    versegen(&["sweep-vocab", "--preset", "tiny", "--data", s(&run.path("data")), "--out", s(&out)])?;
    let csv = read(&out.join("sweep.csv"))?;
    let points: Vec<(usize, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').ok_or("bad sweep row")?;
            Ok((a.parse().map_err(|_| "bad size")?, b.parse().map_err(|_| "bad mean")?))
        })
        .collect::<Result<_, &str>>()?;
    ensure(points.iter().map(|p| p.0).eq([64, 128, 256, 512]), || format!("sizes {points:?}"))?;
    ensure(points.windows(2).all(|w| w[1].1 <= w[0].1), || format!("sweep not non-increasing: {points:?}"))?;
    let means: Vec<String> = points.iter().map(|p| format!("{:.2}", p.1)).collect();
    Ok(format!("{} strings round-trip; avg tokens {}", strings.len(), means.join(" >= ")))
}

fn determinism(a: &Pipeline, b: &Pipeline) -> Outcome {
    let files = [
        "run/metrics.csv",
        "run/validation.csv",
        "run/last.ckpt",
        "run/generated/samples.jsonl",
        "annealed/samples.jsonl",
        "eval/scores.csv",
        "eval/curve.csv",
    ];
    for f in files {
        let x = std::fs::read(a.path(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path(f)).map_err(|e| e.to_string())?;
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} artifacts byte-identical (second run single-threaded)", files.len()))
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let first = Pipeline::run(&w.join("e2e-a"), &[]);
    let second = Pipeline::run(&w.join("e2e-b"), &["--threads", "1"]);
    let needs = |f: &dyn Fn(&Pipeline) -> Outcome| match &first {
        Ok(run) => f(run),
        Err(e) => Err(format!("pipeline failed: {e}")),
    };
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient correctness", gradient_correctness(w)),
        ("schedule fidelity", schedule_fidelity()),
        ("filter oracles", filter_oracles()),
        ("annealing", needs(&annealing)),
        ("anti-lm guarantee", needs(&anti_lm_guarantee)),
        ("overfit sanity", needs(&overfit)),
        ("metric oracles", metric_oracles()),
        ("trend reproduction", needs(&trend)),
        ("tokenizer", needs(&|r| tokenizer_checks(r, w))),
        (
            "determinism",
            match (&first, &second) {
                (Ok(a), Ok(b)) => determinism(a, b),
                (_, Err(e)) | (Err(e), _) => Err(format!("pipeline failed: {e}")),
            },
        ),
    ];
    let mut failed = 0;
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
