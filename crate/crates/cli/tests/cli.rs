use std::path::Path;
use std::process::{Command, Output};

fn versegen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_versegen")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn without_provenance(manifest: &str) -> String {
    manifest.lines().filter(|l| !l.starts_with("provenance =")).collect::<Vec<_>>().join("\n")
}

#[test]
fn version_names_formats() {
    let out = versegen(&["--version"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("versegen "));
    assert!(text.contains("checkpoint format") && text.contains("tokenizer format"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&versegen(&["no-such-command"])), 1);
    assert_eq!(code(&versegen(&["prepare", "--out", "x", "--bogus-flag", "1"])), 1);
    assert_eq!(code(&versegen(&[])), 1);
    assert_eq!(code(&versegen(&["--help"])), 0);
    let out = versegen(&["generate", "--checkpoint", "x.ckpt", "--t", "0.7", "--t0", "0.9"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn invalid_config_value_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "# bad split\nratio = 1.5\n").unwrap();
    let out = versegen(&[
        "train",
        "--config",
        path(&cfg),
        "--data",
        path(dir.path()),
        "--tokenizer",
        "tok.bpe",
        "--out",
        path(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("ratio"), "{}", stderr(&out));
    assert!(!dir.path().join("run").exists());

    std::fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let out = versegen(&["prepare", "--config", path(&cfg), "--out", path(dir.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("no_such_key"));
}

#[test]
fn missing_input_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = versegen(&[
        "generate",
        "--preset",
        "tiny",
        "--checkpoint",
        path(&dir.path().join("absent.ckpt")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn flags_and_config_file_give_identical_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let via_flags = dir.path().join("flags");
    let via_file = dir.path().join("file");
    let out = versegen(&[
        "prepare", "--preset", "tiny", "--ratio", "0.9", "--seed", "3", "--min-suffix", "1", "--out", path(&via_flags),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = dir.path().join("prepare.conf");
    std::fs::write(&cfg, "ratio = 0.9\nseed = 3\nmin_suffix = 1\n").unwrap();
    let out = versegen(&["prepare", "--preset", "tiny", "--config", path(&cfg), "--out", path(&via_file)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let a = std::fs::read_to_string(via_flags.join("manifest.txt")).unwrap();
    let b = std::fs::read_to_string(via_file.join("manifest.txt")).unwrap();
    assert_eq!(without_provenance(&a), without_provenance(&b));
    assert_ne!(a, b);
    assert!(a.contains("config.ratio = 0.9"));
    for name in ["train.jsonl", "validation.jsonl", "split.txt"] {
        assert_eq!(std::fs::read(via_flags.join(name)).unwrap(), std::fs::read(via_file.join(name)).unwrap());
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("a.conf");
    std::fs::write(&cfg, "ratio = 0.8\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = versegen(&["prepare", "--preset", "tiny", "--config", path(&cfg), "--ratio", "0.9", "--out", path(&out_dir)]);
    assert_eq!(code(&out), 0);
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("config.ratio = 0.9"));
}

#[test]
fn check_grads_tiny_preset_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = versegen(&["check-grads", "--preset", "tiny", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("gradcheck.txt")).unwrap();
    assert!(report.contains("PASS"));
    assert!(dir.path().join("manifest.txt").exists());
}

#[test]
fn annealed_generation_example() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, tok, run) = (d.join("data"), d.join("tok"), d.join("run"));
    let tok_file = tok.join("tokenizer.bpe");
    let steps: [&[&str]; 3] = [
        &["prepare", "--preset", "tiny", "--out", path(&data)],
        &["tokenize", "--preset", "tiny", "--data", path(&data), "--out", path(&tok)],
        &[
            "train",
            "--preset",
            "tiny",
            "--epochs",
            "2",
            "--data",
            path(&data),
            "--tokenizer",
            path(&tok_file),
            "--out",
            path(&run),
        ],
    ];
    for args in steps {
        let out = versegen(args);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
    let ckpt = d.join("run/best.ckpt");
    let out = versegen(&[
        "generate", "--checkpoint", path(&ckpt), "--t0", "0.9", "--tf", "0.5", "--anneal-step", "0.05", "--anti-lm", "inf",
        "--n-samples", "5", "--seed", "7", "--trace",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let written = std::fs::read_to_string(d.join("run/generated/samples.jsonl")).unwrap();
    assert_eq!(written, String::from_utf8(out.stdout).unwrap());
    let records: Vec<serde_json::Value> = written.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 5);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["sample"], i);
        assert_eq!(r["seed"], 7);
        let temps = r["trace"]["temperatures"].as_array().unwrap();
        for (step, t) in temps.iter().enumerate() {
            assert_eq!(t.as_f64().unwrap(), (0.9 - 0.05 * step as f64).max(0.5));
        }
    }
    let manifest = std::fs::read_to_string(d.join("run/generated/manifest.txt")).unwrap();
    assert!(manifest.contains("input.checkpoint = "));
    assert!(manifest.contains("config.t0 = 0.9"));

}

#[test]
fn eval_scores_a_samples_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, tok) = (d.join("data"), d.join("tok"));
    assert_eq!(code(&versegen(&["prepare", "--preset", "tiny", "--out", path(&data)])), 0);
    assert_eq!(code(&versegen(&["tokenize", "--preset", "tiny", "--data", path(&data), "--out", path(&tok)])), 0);
    let bpe = versegen::tokenizer::BpeModel::load(&tok.join("tokenizer.bpe")).unwrap();
    let couplets = versegen::corpus::read_couplets_jsonl(&data.join("train.jsonl")).unwrap();
    let mut lines: Vec<String> = couplets
        .iter()
        .map(|c| {
            let tokens: Vec<u32> = bpe.encode_couplet(c)[1..].to_vec();
            serde_json::json!({ "text": c.first, "tokens": tokens, "malformed": false }).to_string()
        })
        .collect();
    lines.push(serde_json::json!({ "text": "", "tokens": [5, 6], "malformed": true }).to_string());
    let samples = d.join("samples.jsonl");
    std::fs::write(&samples, lines.join("\n") + "\n").unwrap();
    let out_dir = d.join("eval");
    let out = versegen(&[
        "eval",
        "--references",
        path(&data.join("train.jsonl")),
        "--samples",
        path(&samples),
        "--tokenizer",
        path(&tok.join("tokenizer.bpe")),
        "--out",
        path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let scores = std::fs::read_to_string(out_dir.join("scores.csv")).unwrap();
    let row: Vec<&str> = scores.lines().nth(1).unwrap().split(',').collect();
    // Every sample is itself a reference.
    assert_eq!(row[1..4], ["1.000000"; 3]);
    assert_eq!(row[7..], [couplets.len().to_string(), "1".to_string()]);
    for name in ["curve.csv", "report.txt", "manifest.txt"] {
        assert!(out_dir.join(name).exists());
    }
}
