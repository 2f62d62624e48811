use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use versegen::corpus::{self, Couplet, DatasetSplit, FetchReport, SplitManifest};
use versegen::decoding;
use versegen::eval::{self, Recipe, TradeoffReport};
use versegen::model::{self, ModelParams};
use versegen::tokenizer::{self, BpeModel};
use versegen::trainer;

use crate::config::{ConfigError, RunConfig};
use crate::manifest::Manifest;
use crate::Command;

/// The sample corpus shipped with the tool, selected with `source = bundled`.
pub const BUNDLED_CORPUS: &str = include_str!("../../../data/sample_poems.jsonl");
pub const BUNDLED: &str = "bundled";

const TOKENIZER_FILE: &str = "tokenizer.bpe";
const GRAD_CHECK_LEN: usize = 12;

pub fn run(command: &Command, cfg: &RunConfig, provenance: String) -> Result<()> {
    let mut manifest = Manifest::new(command.name(), provenance);
    let out = match command {
        Command::Fetch { out, .. } => fetch(cfg, out, &mut manifest)?,
        Command::Prepare { input, out, .. } => prepare(cfg, input.as_deref(), out, &mut manifest)?,
        Command::Tokenize { data, out, .. } => tokenize(cfg, data, out, &mut manifest)?,
        Command::SweepVocab { data, out, .. } => sweep_vocab(cfg, data, out, &mut manifest)?,
        Command::Train { data, tokenizer, out, .. } => train(cfg, data, tokenizer, out, &mut manifest)?,
        Command::Generate { checkpoint, tokenizer, out, trace, .. } => {
            generate(cfg, checkpoint, tokenizer.as_deref(), out.as_deref(), *trace, &mut manifest)?
        }
        Command::Eval { references, samples, checkpoint, tokenizer, out, .. } => eval(
            cfg,
            references,
            samples.as_deref(),
            checkpoint.as_deref(),
            tokenizer.as_deref(),
            out,
            &mut manifest,
        )?,
        Command::CheckGrads { out, .. } => check_grads(cfg, out, &mut manifest)?,
    };
    manifest.write(&out, cfg)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(dir: &Path, name: &str, contents: &str, manifest: &mut Manifest) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(name);
    Ok(path)
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} not found at {}", path.display());
    }
    Ok(())
}

fn load_source(cfg: &RunConfig, manifest: &mut Manifest) -> Result<FetchReport> {
    let source = cfg.raw("source");
    if source.is_empty() {
        return Err(ConfigError("`source` is not set; pass --source or --input".into()).into());
    }
    if source == BUNDLED {
        manifest.input_bytes("source", BUNDLED, BUNDLED_CORPUS.as_bytes());
        return Ok(corpus::parse_poem_records(BUNDLED_CORPUS));
    }
    let report = corpus::fetch_poems_with(source, &cfg.fetch_options())?;
    if Path::new(source).is_file() {
        manifest.input_file("source", Path::new(source))?;
    } else {
        manifest.input_bytes("source", source, corpus::poems_to_jsonl(&report.poems).as_bytes());
    }
    Ok(report)
}

fn skipped_text(report: &FetchReport) -> String {
    let mut s = String::from("position\treason\n");
    for r in &report.skipped {
        let _ = writeln!(s, "{}\t{}", r.position, r.reason);
    }
    s
}

fn fetch(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<PathBuf> {
    let report = load_source(cfg, manifest)?;
    create_dir(out)?;
    write(out, "poems.jsonl", &corpus::poems_to_jsonl(&report.poems), manifest)?;
    write(out, "skipped.tsv", &skipped_text(&report), manifest)?;
    println!("fetched {} poems, skipped {} malformed records", report.poems.len(), report.skipped.len());
    Ok(out.to_path_buf())
}

fn prepare(cfg: &RunConfig, input: Option<&Path>, out: &Path, manifest: &mut Manifest) -> Result<PathBuf> {
    let report = match input {
        Some(path) => {
            require_file(path, "poem file")?;
            manifest.input_file("poems", path)?;
            corpus::fetch_poems(&path.display().to_string(), 1)?
        }
        None => load_source(cfg, manifest)?,
    };
    let delimiter = cfg.delimiter()?;
    let mut couplets = Vec::new();
    let mut dropped_lines = 0;
    for poem in &report.poems {
        let ex = corpus::split_into_couplets(poem, &delimiter);
        dropped_lines += ex.dropped;
        couplets.extend(ex.couplets);
    }
    let extracted = couplets.len();
    let rhyming = corpus::filter_rhyming(couplets, cfg.min_suffix());
    let split = corpus::build_split(&rhyming, cfg.ratio()?, cfg.seed())?;
    create_dir(out)?;
    write(out, "train.jsonl", &corpus::couplets_to_jsonl(&split.train), manifest)?;
    write(out, "validation.jsonl", &corpus::couplets_to_jsonl(&split.validation), manifest)?;
    write(out, "split.txt", &SplitManifest::of(&split).to_text(), manifest)?;
    let summary = format!(
        "poems = {}\nskipped_records = {}\ndropped_lines = {}\ncouplets = {}\nnon_rhyming = {}\ntrain = {}\nvalidation = {}\n",
        report.poems.len(),
        report.skipped.len(),
        dropped_lines,
        extracted,
        extracted - rhyming.len(),
        split.train.len(),
        split.validation.len()
    );
    write(out, "prepare.txt", &summary, manifest)?;
    print!("{summary}");
    Ok(out.to_path_buf())
}

fn read_split_file(data: &Path, name: &str, manifest: &mut Manifest) -> Result<Vec<Couplet>> {
    let path = data.join(name);
    require_file(&path, name)?;
    manifest.input_file(name.trim_end_matches(".jsonl"), &path)?;
    Ok(corpus::read_couplets_jsonl(&path)?)
}

fn tokenize(cfg: &RunConfig, data: &Path, out: &Path, manifest: &mut Manifest) -> Result<PathBuf> {
    let train = read_split_file(data, "train.jsonl", manifest)?;
    let bpe = tokenizer::train_bpe(&train, cfg.usize("vocab_size"))?;
    let mut failures = 0;
    for c in &train {
        for text in [&c.first, &c.second] {
            if bpe.decode(&bpe.encode(text))? != *text {
                failures += 1;
            }
        }
    }
    if failures > 0 {
        bail!("{failures} training hemistichs do not survive an encode/decode round trip");
    }
    create_dir(out)?;
    let path = out.join(TOKENIZER_FILE);
    bpe.save(&path)?;
    manifest.output(TOKENIZER_FILE);
    println!(
        "vocab_size = {} ({} base characters, {} merges), avg tokens per couplet = {:.3}",
        bpe.vocab_size(),
        bpe.n_base(),
        bpe.n_merges(),
        tokenizer::mean_couplet_tokens(&bpe, &train)
    );
    Ok(out.to_path_buf())
}

fn sweep_vocab(cfg: &RunConfig, data: &Path, out: &Path, manifest: &mut Manifest) -> Result<PathBuf> {
    let train = read_split_file(data, "train.jsonl", manifest)?;
    let points = tokenizer::vocab_sweep(&train, &cfg.sweep_sizes()?)?;
    create_dir(out)?;
    let csv = tokenizer::sweep_to_csv(&points);
    write(out, "sweep.csv", &csv, manifest)?;
    print!("{csv}");
    Ok(out.to_path_buf())
}

fn load_tokenizer(path: &Path, manifest: &mut Manifest) -> Result<BpeModel> {
    require_file(path, "tokenizer")?;
    manifest.input_file("tokenizer", path)?;
    Ok(BpeModel::load(path)?)
}

fn train(cfg: &RunConfig, data: &Path, tokenizer_path: &Path, out: &Path, manifest: &mut Manifest) -> Result<PathBuf> {
    let train = read_split_file(data, "train.jsonl", manifest)?;
    let validation = read_split_file(data, "validation.jsonl", manifest)?;
    let bpe = load_tokenizer(tokenizer_path, manifest)?;
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let split = DatasetSplit { train, validation, seed: cfg.seed(), ratio: cfg.f64("ratio") };
    create_dir(out)?;
    let outcome = trainer::train(&model_cfg, &train_cfg, &split, &bpe, out)?;
    bpe.save(&out.join(TOKENIZER_FILE))?;
    manifest.output(TOKENIZER_FILE);
    for name in ["metrics.csv", "validation.csv", "best.ckpt", "last.ckpt"] {
        manifest.output(name);
    }
    for path in &outcome.checkpoints {
        manifest.output(&path.file_name().unwrap_or_default().to_string_lossy());
    }
    let ctx = outcome.final_params.config.context_len;
    let fits: Vec<Couplet> = split.train.iter().filter(|c| bpe.encode_couplet(c).len() <= ctx).cloned().collect();
    let final_loss = trainer::evaluate_loss(&outcome.final_params, &fits, &bpe, 0.0, train_cfg.batch_size)?;
    let m = &outcome.metrics;
    let summary = format!(
        "steps = {}\nepochs = {}\nbest_epoch = {}\ncontext_len = {}\nvocab_size = {}\nparameters = {}\nskipped_too_long = {}\nfinal_train_loss = {}\nfinal_train_loss_unsmoothed = {}\nfinal_val_loss = {}\n",
        m.steps.len(),
        m.epochs.len(),
        m.best_epoch.map_or("none".to_string(), |e| e.to_string()),
        ctx,
        outcome.final_params.config.vocab_size,
        outcome.final_params.param_count(),
        m.skipped_too_long,
        m.epochs.last().map_or(f64::NAN, |e| e.train_loss),
        final_loss,
        m.epochs.last().map_or(f64::NAN, |e| e.val_loss),
    );
    write(out, "summary.txt", &summary, manifest)?;
    print!("{summary}");
    Ok(out.to_path_buf())
}

fn sibling(anchor: &Path, name: &str) -> PathBuf {
    anchor.parent().unwrap_or(Path::new(".")).join(name)
}

fn load_checkpoint(path: &Path, manifest: &mut Manifest) -> Result<ModelParams> {
    require_file(path, "checkpoint")?;
    manifest.input_file("checkpoint", path)?;
    Ok(model::load_checkpoint(path)?.0)
}

fn generate(
    cfg: &RunConfig,
    checkpoint: &Path,
    tokenizer_path: Option<&Path>,
    out: Option<&Path>,
    trace: bool,
    manifest: &mut Manifest,
) -> Result<PathBuf> {
    let decode = cfg.decode_config()?;
    let params = load_checkpoint(checkpoint, manifest)?;
    let tok_path = tokenizer_path.map(Path::to_path_buf).unwrap_or_else(|| sibling(checkpoint, TOKENIZER_FILE));
    let bpe = load_tokenizer(&tok_path, manifest)?;
    let n = cfg.usize("n_samples");
    let samples = decoding::generate_batch(&params, &bpe, &decode, n)?;
    let jsonl = decoding::generations_to_jsonl(&samples, &decode, trace);
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| sibling(checkpoint, "generated"));
    create_dir(&out)?;
    write(&out, "samples.jsonl", &jsonl, manifest)?;
    print!("{jsonl}");
    let malformed = samples.iter().filter(|g| g.malformed).count();
    let skips: usize = samples.iter().map(|g| g.trace.skip_events.len()).sum();
    eprintln!("{n} samples, {malformed} malformed, {skips} anti-LM skip events");
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn eval(
    cfg: &RunConfig,
    references: &Path,
    samples: Option<&Path>,
    checkpoint: Option<&Path>,
    tokenizer_path: Option<&Path>,
    out: &Path,
    manifest: &mut Manifest,
) -> Result<PathBuf> {
    require_file(references, "reference file")?;
    manifest.input_file("references", references)?;
    let refs = corpus::read_couplets_jsonl(references)?;
    let refs = eval::subsample_references(&refs, cfg.usize("ref_subsample"), cfg.seed());
    // Default tokenizer: next to the checkpoint, or next to the directory
    // holding the samples (the layout `generate` writes).
    let tok_path = tokenizer_path
        .map(Path::to_path_buf)
        .or_else(|| checkpoint.map(|c| sibling(c, TOKENIZER_FILE)))
        .or_else(|| samples.and_then(Path::parent).map(|d| sibling(d, TOKENIZER_FILE)))
        .ok_or_else(|| ConfigError("eval needs --checkpoint, --samples or --tokenizer".into()))?;
    let bpe = load_tokenizer(&tok_path, manifest)?;
    let report = match (samples, checkpoint) {
        (Some(path), _) => {
            require_file(path, "samples file")?;
            manifest.input_file("samples", path)?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let records = decoding::read_generations_jsonl(&text)?;
            let good: Vec<Vec<u32>> = records.iter().filter(|r| !r.malformed).map(|r| eval::scoring_tokens(&r.tokens)).collect();
            let ref_tokens: Vec<Vec<u32>> = refs.iter().map(|c| eval::scoring_tokens(&bpe.encode_couplet(c))).collect();
            let label = path.file_name().unwrap_or_default().to_string_lossy().to_string();
            let row = eval::score_set(&label, &good, &ref_tokens, records.len() - good.len())?;
            TradeoffReport { rows: vec![row] }
        }
        (None, Some(ckpt)) => {
            let params = load_checkpoint(ckpt, manifest)?;
            let recipes = match cfg.raw("recipes") {
                "standard" => eval::standard_recipes(cfg.usize("max_tokens"), cfg.seed()),
                _ => vec![Recipe::new(cfg.decode_config()?)],
            };
            eval::tradeoff_report(&params, &bpe, &recipes, &refs, cfg.usize("n_samples"))?
        }
        (None, None) => return Err(ConfigError("eval needs --samples or --checkpoint".into()).into()),
    };
    create_dir(out)?;
    write(out, "scores.csv", &report.scores_csv(), manifest)?;
    write(out, "curve.csv", &report.curve_csv(), manifest)?;
    let text = report.to_text();
    write(out, "report.txt", &text, manifest)?;
    print!("{text}");
    Ok(out.to_path_buf())
}

fn check_grads(cfg: &RunConfig, out: &Path, manifest: &mut Manifest) -> Result<PathBuf> {
    let mut model_cfg = cfg.model_config()?;
    if model_cfg.context_len == 0 {
        model_cfg.context_len = GRAD_CHECK_LEN;
    }
    model_cfg.dropout = 0.0;
    let seed = cfg.seed();
    let params = model::init_model(&model_cfg, seed)?;
    let batch = model::random_batch(&model_cfg, 2, GRAD_CHECK_LEN, seed)?;
    let report = model::gradient_check(
        &params,
        &batch,
        cfg.f64("smoothing"),
        cfg.f64("grad_tolerance"),
        cfg.usize("grad_coords"),
        seed,
    )?;
    create_dir(out)?;
    let text = report.to_text();
    write(out, "gradcheck.txt", &text, manifest)?;
    print!("{text}");
    if !report.passed {
        manifest.write(out, cfg)?;
        bail!("gradient check failed: max relative error {:.3e} >= {:.1e}", report.max_rel_error(), report.tolerance);
    }
    Ok(out.to_path_buf())
}
