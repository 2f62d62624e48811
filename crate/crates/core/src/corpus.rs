//! Poem ingestion, couplet extraction, rhyme filtering and dataset splits.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::thread;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DELIMITER: &str = "\t";
pub const DEFAULT_MIN_SUFFIX: usize = 2;
pub const DEFAULT_RATIO: f64 = 0.95;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("transport error fetching {source_name}: {message}")]
    Transport { source_name: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawPoem {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poet: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Couplet {
    pub first: String,
    pub second: String,
    pub source_id: String,
}

impl Couplet {
    /// Builds a couplet, normalizing whitespace. Returns `None` if either
    /// hemistich is empty afterwards.
    pub fn new(first: &str, second: &str, source_id: impl Into<String>) -> Option<Self> {
        let first = normalize_whitespace(first);
        let second = normalize_whitespace(second);
        if first.is_empty() || second.is_empty() {
            return None;
        }
        Some(Self { first, second, source_id: source_id.into() })
    }
}

/// Collapses whitespace runs to a single space and trims both ends.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Couplet>,
    pub validation: Vec<Couplet>,
    pub seed: u64,
    pub ratio: f64,
}

/// A record that could not be parsed; ingestion continues past it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRecord {
    /// 1-based line number for JSONL, 0-based element index for JSON arrays.
    pub position: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FetchReport {
    pub poems: Vec<RawPoem>,
    pub skipped: Vec<SkippedRecord>,
}

#[derive(Debug, Clone)]
pub struct FetchOptions {
    pub page_limit: usize,
    pub page_size: usize,
    pub retries: usize,
    pub backoff: Duration,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self { page_limit: 1, page_size: 100, retries: 3, backoff: Duration::from_millis(250) }
    }
}

/// Reads poems from a local JSON/JSONL file or an HTTP endpoint.
///
/// HTTP sources may contain `{page}` and `{page_size}` placeholders; pages
/// `1..=page_limit` are requested in order and fetching stops at the first
/// empty page. Without placeholders a single request is made.
pub fn fetch_poems(source: &str, page_limit: usize) -> Result<FetchReport, CorpusError> {
    fetch_poems_with(source, &FetchOptions { page_limit, ..FetchOptions::default() })
}

pub fn fetch_poems_with(source: &str, opts: &FetchOptions) -> Result<FetchReport, CorpusError> {
    if source.starts_with("http://") || source.starts_with("https://") {
        fetch_http(source, opts)
    } else {
        let path = Path::new(source);
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Ok(parse_poem_records(&text))
    }
}

fn fetch_http(template: &str, opts: &FetchOptions) -> Result<FetchReport, CorpusError> {
    let paged = template.contains("{page}");
    let pages = if paged { opts.page_limit.max(1) } else { 1 };
    let mut report = FetchReport::default();
    for page in 1..=pages {
        let url = template
            .replace("{page}", &page.to_string())
            .replace("{page_size}", &opts.page_size.to_string());
        let body = get_with_retry(&url, opts)?;
        let page_report = parse_poem_records(&body);
        if page_report.poems.is_empty() && page_report.skipped.is_empty() {
            break;
        }
        report.poems.extend(page_report.poems);
        report.skipped.extend(page_report.skipped.into_iter().map(|mut s| {
            s.reason = format!("page {page}: {}", s.reason);
            s
        }));
    }
    Ok(report)
}

fn get_with_retry(url: &str, opts: &FetchOptions) -> Result<String, CorpusError> {
    let mut last_err = String::new();
    for attempt in 0..=opts.retries {
        if attempt > 0 {
            thread::sleep(opts.backoff * (1u32 << (attempt - 1).min(16)));
        }
        match ureq::get(url).call() {
            Ok(mut resp) => match resp.body_mut().read_to_string() {
                Ok(body) => return Ok(body),
                Err(e) => last_err = e.to_string(),
            },
            Err(e) => last_err = e.to_string(),
        }
    }
    Err(CorpusError::Transport {
        source_name: url.to_string(),
        message: format!("{} attempts failed, last error: {last_err}", opts.retries + 1),
    })
}

/// Parses either a JSON array of poem records or JSONL (one record per line).
pub fn parse_poem_records(text: &str) -> FetchReport {
    let mut report = FetchReport::default();
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        match serde_json::from_str::<Vec<serde_json::Value>>(trimmed) {
            Ok(values) => {
                for (i, value) in values.into_iter().enumerate() {
                    match poem_from_value(value) {
                        Ok(p) => report.poems.push(p),
                        Err(reason) => report.skipped.push(SkippedRecord { position: i, reason }),
                    }
                }
            }
            Err(e) => report
                .skipped
                .push(SkippedRecord { position: 0, reason: format!("malformed JSON array: {e}") }),
        }
        return report;
    }
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<serde_json::Value>(line)
            .map_err(|e| e.to_string())
            .and_then(poem_from_value);
        match parsed {
            Ok(p) => report.poems.push(p),
            Err(reason) => report.skipped.push(SkippedRecord { position: i + 1, reason }),
        }
    }
    report
}

fn poem_from_value(value: serde_json::Value) -> Result<RawPoem, String> {
    let poem: RawPoem = serde_json::from_value(value).map_err(|e| e.to_string())?;
    if poem.body.trim().is_empty() {
        return Err(format!("poem {} has an empty body", poem.id));
    }
    Ok(poem)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CoupletExtraction {
    pub couplets: Vec<Couplet>,
    pub dropped: usize,
}

/// One couplet per body line holding exactly one delimiter; every other
/// non-blank line is dropped and counted.
pub fn split_into_couplets(poem: &RawPoem, delimiter: &str) -> CoupletExtraction {
    assert!(!delimiter.is_empty(), "hemistich delimiter must be non-empty");
    let mut out = CoupletExtraction::default();
    for line in poem.body.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(delimiter);
        let (first, second) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) => (a, b),
            _ => {
                out.dropped += 1;
                continue;
            }
        };
        match Couplet::new(first, second, poem.id.clone()) {
            Some(c) => out.couplets.push(c),
            None => out.dropped += 1,
        }
    }
    out
}

/// Letter variants unified before rhyme comparison (Arabic-script forms
/// folded to their Persian counterparts, hamza carriers to bare letters).
const LETTER_VARIANTS: &[(char, char)] = &[
    ('\u{064A}', '\u{06CC}'), // ARABIC YEH -> FARSI YEH
    ('\u{0649}', '\u{06CC}'), // ALEF MAKSURA -> FARSI YEH
    ('\u{0643}', '\u{06A9}'), // ARABIC KAF -> KEHEH
    ('\u{0623}', '\u{0627}'), // ALEF WITH HAMZA ABOVE -> ALEF
    ('\u{0625}', '\u{0627}'), // ALEF WITH HAMZA BELOW -> ALEF
    ('\u{0622}', '\u{0627}'), // ALEF WITH MADDA -> ALEF
    ('\u{0671}', '\u{0627}'), // ALEF WASLA -> ALEF
    ('\u{0624}', '\u{0648}'), // WAW WITH HAMZA -> WAW
    ('\u{0626}', '\u{06CC}'), // YEH WITH HAMZA -> FARSI YEH
    ('\u{0629}', '\u{0647}'), // TEH MARBUTA -> HEH
    ('\u{06C0}', '\u{0647}'), // HEH WITH YEH ABOVE -> HEH
];

fn is_combining_mark(c: char) -> bool {
    matches!(c,
        '\u{0300}'..='\u{036F}'
        | '\u{0610}'..='\u{061A}'
        | '\u{064B}'..='\u{065F}'
        | '\u{0670}'
        | '\u{06D6}'..='\u{06ED}'
        | '\u{200C}'..='\u{200D}')
}

/// Strips combining marks, folds letter variants and lowercases.
pub fn normalize_word(word: &str) -> String {
    word.chars()
        .filter(|&c| !is_combining_mark(c))
        .map(|c| {
            LETTER_VARIANTS
                .iter()
                .find(|(from, _)| *from == c)
                .map(|&(_, to)| to)
                .unwrap_or(c)
        })
        .flat_map(char::to_lowercase)
        .collect()
}

/// Last run of word characters in a hemistich, normalized.
pub fn final_word(hemistich: &str) -> Option<String> {
    let normalized = normalize_word(hemistich);
    normalized
        .split(|c: char| !c.is_alphanumeric())
        .rfind(|w| !w.is_empty())
        .map(str::to_string)
}

/// Suffix rhyme test on the final words of the two hemistichs.
pub fn is_rhyming(c: &Couplet, min_suffix: usize) -> bool {
    assert!(min_suffix >= 1, "min_suffix must be at least 1");
    let (Some(a), Some(b)) = (final_word(&c.first), final_word(&c.second)) else {
        return false;
    };
    if a == b {
        return false;
    }
    let shared = a.chars().rev().zip(b.chars().rev()).take_while(|(x, y)| x == y).count();
    shared >= min_suffix
}

pub fn filter_rhyming(couplets: Vec<Couplet>, min_suffix: usize) -> Vec<Couplet> {
    couplets.into_iter().filter(|c| is_rhyming(c, min_suffix)).collect()
}

/// Train size for `n` couplets: round-half-up of `ratio * n`, kept inside
/// `[1, n - 1]` so both sides are non-empty.
pub fn train_size(n: usize, ratio: f64) -> usize {
    let raw = (ratio * n as f64 + 0.5).floor() as usize;
    raw.clamp(1, n - 1)
}

pub fn build_split(couplets: &[Couplet], ratio: f64, seed: u64) -> Result<DatasetSplit, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::InvalidInput(format!("ratio must lie in (0, 1), got {ratio}")));
    }
    if couplets.len() < 2 {
        return Err(CorpusError::InvalidInput(format!(
            "need at least 2 couplets to split, got {}",
            couplets.len()
        )));
    }
    let mut order: Vec<usize> = (0..couplets.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = train_size(couplets.len(), ratio);
    let pick = |ids: &[usize]| ids.iter().map(|&i| couplets[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        validation: pick(&order[n_train..]),
        seed,
        ratio,
    })
}

pub fn poems_to_jsonl(poems: &[RawPoem]) -> String {
    let mut out = String::new();
    for p in poems {
        out.push_str(&serde_json::to_string(p).expect("poem record serializes"));
        out.push('\n');
    }
    out
}

pub fn couplets_to_jsonl(couplets: &[Couplet]) -> String {
    let mut out = String::new();
    for c in couplets {
        // serialization of a plain struct of strings cannot fail
        out.push_str(&serde_json::to_string(c).expect("couplet serializes"));
        out.push('\n');
    }
    out
}

pub fn write_couplets_jsonl(path: &Path, couplets: &[Couplet]) -> Result<(), CorpusError> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(couplets_to_jsonl(couplets).as_bytes()).map_err(|e| io_err(path, e))
}

pub fn read_couplets_jsonl(path: &Path) -> Result<Vec<Couplet>, CorpusError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Couplet = serde_json::from_str(&line).map_err(|e| {
            CorpusError::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(c);
    }
    Ok(out)
}

/// Seed, ratio, counts and a content hash over both serialized halves.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: f64,
    pub train_count: usize,
    pub validation_count: usize,
    pub content_hash: String,
}

impl SplitManifest {
    pub fn of(split: &DatasetSplit) -> Self {
        let mut bytes = couplets_to_jsonl(&split.train).into_bytes();
        bytes.extend_from_slice(b"--\n");
        bytes.extend_from_slice(couplets_to_jsonl(&split.validation).as_bytes());
        Self {
            seed: split.seed,
            ratio: split.ratio,
            train_count: split.train.len(),
            validation_count: split.validation.len(),
            content_hash: crate::sha256_hex(&bytes),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "ratio = {}", self.ratio);
        let _ = writeln!(s, "train_count = {}", self.train_count);
        let _ = writeln!(s, "validation_count = {}", self.validation_count);
        let _ = writeln!(s, "content_sha256 = {}", self.content_hash);
        s
    }
}
