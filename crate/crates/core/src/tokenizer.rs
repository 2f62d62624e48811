//! Byte-pair encoding codec and vocabulary-size sweep.
//!
//! Id layout: `0..4` are BOS, EOS, SEP and PAD; `4..20` is the byte-fallback
//! range, one id per hex nibble (an unseen character becomes two nibble ids
//! per UTF-8 byte); base characters follow in code-point order and merged
//! tokens follow in merge-rank order.
//!
//! Text is pre-split into chunks of one non-whitespace run plus its trailing
//! whitespace; merges never cross chunk boundaries.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::corpus::Couplet;

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const PAD: u32 = 3;
pub const N_SPECIALS: usize = 4;
pub const FALLBACK_START: u32 = 4;
pub const N_FALLBACK: usize = 16;
/// Ids below this value are never produced by merges or base characters.
pub const RESERVED: usize = N_SPECIALS + N_FALLBACK;
pub const DEFAULT_VOCAB_SIZE: usize = 8000;

pub const FORMAT_TAG: &str = "bpe-v1";
const SPECIAL_NAMES: [&str; N_SPECIALS] = ["<|bos|>", "<|eos|>", "<|sep|>", "<|pad|>"];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("invalid tokenizer config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    InvalidId { id: u32, vocab_size: usize },
    #[error("malformed tokenizer file: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    /// Regular tokens; token `i` has id `RESERVED + i`.
    tokens: Vec<String>,
    token_ids: HashMap<String, u32>,
    n_base: usize,
    /// Merge list in rank order; the merge at rank `r` produces id
    /// `RESERVED + n_base + r`.
    merges: Vec<(u32, u32)>,
    merge_ranks: HashMap<(u32, u32), u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub vocab_size: usize,
    pub avg_tokens_per_couplet: f64,
}

/// Splits text into chunks: a maximal non-whitespace run plus any trailing
/// whitespace. Leading whitespace forms its own chunk.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if !ws && prev_ws && i > start {
            chunks.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}

fn couplet_texts(corpus: &[Couplet]) -> impl Iterator<Item = &str> {
    corpus.iter().flat_map(|c| [c.first.as_str(), c.second.as_str()])
}

pub fn train_bpe(corpus: &[Couplet], vocab_size: usize) -> Result<BpeModel, TokenizerError> {
    train_bpe_on_texts(couplet_texts(corpus), vocab_size)
}

/// Greedy BPE training. The most frequent adjacent pair is merged until the
/// vocabulary reaches `vocab_size` or no pair occurs at least twice; count
/// ties go to the lexicographically smallest `(left, right)` string pair.
pub fn train_bpe_on_texts<'a, I>(texts: I, vocab_size: usize) -> Result<BpeModel, TokenizerError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut chunk_counts: HashMap<&'a str, u64> = HashMap::new();
    let mut chars: Vec<char> = Vec::new();
    let mut seen: HashSet<char> = HashSet::new();
    for text in texts {
        for chunk in pretokenize(text) {
            *chunk_counts.entry(chunk).or_default() += 1;
        }
        for c in text.chars() {
            if seen.insert(c) {
                chars.push(c);
            }
        }
    }
    chars.sort_unstable();
    if vocab_size < RESERVED + chars.len() {
        return Err(TokenizerError::InvalidConfig(format!(
            "vocab_size {vocab_size} is below {} reserved ids + {} base characters",
            RESERVED,
            chars.len()
        )));
    }

    let mut model = BpeModel::empty();
    for c in &chars {
        model.push_token(c.to_string());
    }
    model.n_base = chars.len();

    // Deterministic word order so the merge loop never depends on hash order.
    let mut words: Vec<(&str, u64)> = chunk_counts.into_iter().collect();
    words.sort_unstable();
    let mut symbols: Vec<Vec<u32>> = words
        .iter()
        .map(|(w, _)| w.chars().map(|c| model.token_ids[&c.to_string()]).collect())
        .collect();
    let counts: Vec<i64> = words.iter().map(|&(_, n)| n as i64).collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut pair_words: HashMap<(u32, u32), HashSet<usize>> = HashMap::new();
    for (wi, syms) in symbols.iter().enumerate() {
        for pair in syms.windows(2) {
            let key = (pair[0], pair[1]);
            *pair_counts.entry(key).or_default() += counts[wi];
            pair_words.entry(key).or_default().insert(wi);
        }
    }

    while model.vocab_size() < vocab_size {
        let Some(best) = model.best_pair(&pair_counts) else { break };
        let new_id = model.push_merge(best);
        pair_counts.remove(&best);
        let mut affected: Vec<usize> = pair_words.remove(&best).unwrap_or_default().into_iter().collect();
        affected.sort_unstable();
        for wi in affected {
            let old = &symbols[wi];
            if !old.windows(2).any(|p| (p[0], p[1]) == best) {
                continue;
            }
            for p in old.windows(2) {
                let key = (p[0], p[1]);
                if key == best {
                    continue;
                }
                if let Some(c) = pair_counts.get_mut(&key) {
                    *c -= counts[wi];
                    if *c <= 0 {
                        pair_counts.remove(&key);
                    }
                }
            }
            let merged = merge_pair(old, best, new_id);
            for p in merged.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += counts[wi];
                pair_words.entry(key).or_default().insert(wi);
            }
            symbols[wi] = merged;
        }
    }
    Ok(model)
}

fn merge_pair(syms: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && (syms[i], syms[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String, TokenizerError> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            other => return Err(TokenizerError::Format(format!("bad escape \\{other:?} in {s:?}"))),
        }
    }
    Ok(out)
}

fn reserved_name(id: u32) -> String {
    if (id as usize) < N_SPECIALS {
        SPECIAL_NAMES[id as usize].to_string()
    } else {
        format!("<0x{:X}>", id - FALLBACK_START)
    }
}

impl BpeModel {
    fn empty() -> Self {
        Self {
            tokens: Vec::new(),
            token_ids: HashMap::new(),
            n_base: 0,
            merges: Vec::new(),
            merge_ranks: HashMap::new(),
        }
    }

    fn push_token(&mut self, s: String) -> u32 {
        let id = (RESERVED + self.tokens.len()) as u32;
        self.token_ids.insert(s.clone(), id);
        self.tokens.push(s);
        id
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let s = format!("{}{}", self.regular(pair.0), self.regular(pair.1));
        let rank = self.merges.len() as u32;
        self.merges.push(pair);
        self.merge_ranks.insert(pair, rank);
        self.push_token(s)
    }

    fn regular(&self, id: u32) -> &str {
        &self.tokens[id as usize - RESERVED]
    }

    fn best_pair(&self, counts: &HashMap<(u32, u32), i64>) -> Option<(u32, u32)> {
        let mut best: Option<((u32, u32), i64)> = None;
        for (&pair, &count) in counts {
            if count < 2 {
                continue;
            }
            best = match best {
                None => Some((pair, count)),
                Some((bp, bc)) => {
                    let better = count > bc
                        || (count == bc
                            && (self.regular(pair.0), self.regular(pair.1))
                                < (self.regular(bp.0), self.regular(bp.1)));
                    if better {
                        Some((pair, count))
                    } else {
                        Some((bp, bc))
                    }
                }
            };
        }
        best.map(|(p, _)| p)
    }

    /// Total ids including the reserved range.
    pub fn vocab_size(&self) -> usize {
        RESERVED + self.tokens.len()
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn n_merges(&self) -> usize {
        self.merges.len()
    }

    /// Merge list as token strings, in rank order.
    pub fn merges(&self) -> Vec<(String, String)> {
        self.merges
            .iter()
            .map(|&(l, r)| (self.regular(l).to_string(), self.regular(r).to_string()))
            .collect()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.token_ids.get(token).copied()
    }

    /// Display string of any id, reserved ids included.
    pub fn token_str(&self, id: u32) -> Option<String> {
        match id as usize {
            i if i < RESERVED => Some(reserved_name(id)),
            i if i < self.vocab_size() => Some(self.tokens[i - RESERVED].clone()),
            _ => None,
        }
    }

    /// Keeps the first `vocab_size - RESERVED - n_base` merges. Equal to a
    /// model trained directly at `vocab_size` on the same corpus.
    pub fn truncated(&self, vocab_size: usize) -> Result<Self, TokenizerError> {
        if vocab_size < RESERVED + self.n_base {
            return Err(TokenizerError::InvalidConfig(format!(
                "vocab_size {vocab_size} is below {} reserved ids + {} base characters",
                RESERVED, self.n_base
            )));
        }
        let keep = (vocab_size - RESERVED - self.n_base).min(self.merges.len());
        let mut out = Self::empty();
        for s in &self.tokens[..self.n_base] {
            out.push_token(s.clone());
        }
        out.n_base = self.n_base;
        for &pair in &self.merges[..keep] {
            out.push_merge(pair);
        }
        Ok(out)
    }

    fn chunk_symbols(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut buf = [0u8; 4];
        for c in chunk.chars() {
            match self.token_ids.get(c.encode_utf8(&mut buf) as &str) {
                Some(&id) if (id as usize) < RESERVED + self.n_base => out.push(id),
                _ => {
                    for &b in c.encode_utf8(&mut buf).as_bytes() {
                        out.push(FALLBACK_START + (b >> 4) as u32);
                        out.push(FALLBACK_START + (b & 0x0F) as u32);
                    }
                }
            }
        }
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<u32>) {
        let mut syms = Vec::with_capacity(chunk.len());
        self.chunk_symbols(chunk, &mut syms);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.merge_ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            let new_id = (RESERVED + self.n_base) as u32 + rank;
            syms = merge_pair(&syms, pair, new_id);
        }
        out.extend_from_slice(&syms);
    }

    /// Applies merges by ascending rank. Never fails: characters outside the
    /// base alphabet go through the byte-fallback range.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    /// `BOS first SEP second EOS`.
    pub fn encode_couplet(&self, c: &Couplet) -> Vec<u32> {
        let mut out = vec![BOS];
        out.extend(self.encode(&c.first));
        out.push(SEP);
        out.extend(self.encode(&c.second));
        out.push(EOS);
        out
    }

    /// Decodes with SEP rendered as a tab.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        self.decode_with(ids, crate::corpus::DEFAULT_DELIMITER)
    }

    /// SEP renders as `separator`; BOS, EOS and PAD render as nothing.
    pub fn decode_with(&self, ids: &[u32], separator: &str) -> Result<String, TokenizerError> {
        let mut out = String::new();
        let mut bytes: Vec<u8> = Vec::new();
        let mut high: Option<u8> = None;
        let flush = |bytes: &mut Vec<u8>, high: &mut Option<u8>, out: &mut String| {
            if !bytes.is_empty() {
                out.push_str(&String::from_utf8_lossy(bytes));
                bytes.clear();
            }
            *high = None;
        };
        for &id in ids {
            let idx = id as usize;
            if idx >= self.vocab_size() {
                return Err(TokenizerError::InvalidId { id, vocab_size: self.vocab_size() });
            }
            if (FALLBACK_START as usize..RESERVED).contains(&idx) {
                let nibble = (id - FALLBACK_START) as u8;
                match high.take() {
                    None => high = Some(nibble),
                    Some(h) => bytes.push((h << 4) | nibble),
                }
                continue;
            }
            flush(&mut bytes, &mut high, &mut out);
            match id {
                SEP => out.push_str(separator),
                BOS | EOS | PAD => {}
                _ => out.push_str(self.regular(id)),
            }
        }
        flush(&mut bytes, &mut high, &mut out);
        Ok(out)
    }

    /// Versioned text serialization: header, `id<TAB>token` lines, then
    /// `left<TAB>right` merge lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FORMAT_TAG} {}", self.vocab_size());
        for id in 0..RESERVED as u32 {
            let _ = writeln!(s, "{id}\t{}", reserved_name(id));
        }
        for (i, tok) in self.tokens.iter().enumerate() {
            let _ = writeln!(s, "{}\t{}", RESERVED + i, escape(tok));
        }
        for &(l, r) in &self.merges {
            let _ = writeln!(s, "{}\t{}", escape(self.regular(l)), escape(self.regular(r)));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let fmt = |m: String| TokenizerError::Format(m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| fmt("empty file".into()))?;
        let vocab_size: usize = header
            .strip_prefix(FORMAT_TAG)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| fmt(format!("bad header {header:?}")))?;
        if vocab_size < RESERVED {
            return Err(fmt(format!("vocab_size {vocab_size} smaller than reserved range")));
        }
        let mut tokens = Vec::with_capacity(vocab_size - RESERVED);
        for expected in 0..vocab_size {
            let line = lines.next().ok_or_else(|| fmt(format!("missing vocab entry {expected}")))?;
            let (id, tok) = line.split_once('\t').ok_or_else(|| fmt(format!("bad vocab line {line:?}")))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(fmt(format!("vocab ids out of order at {line:?}")));
            }
            if expected >= RESERVED {
                tokens.push(unescape(tok)?);
            }
        }
        let mut merge_lines = Vec::new();
        for line in lines {
            let (l, r) = line.split_once('\t').ok_or_else(|| fmt(format!("bad merge line {line:?}")))?;
            merge_lines.push((unescape(l)?, unescape(r)?));
        }
        let n_base = tokens
            .len()
            .checked_sub(merge_lines.len())
            .ok_or_else(|| fmt("more merges than vocabulary entries".into()))?;
        let mut model = Self::empty();
        for t in &tokens[..n_base] {
            if t.chars().count() != 1 {
                return Err(fmt(format!("base token {t:?} is not a single character")));
            }
            if model.token_ids.contains_key(t) {
                return Err(fmt(format!("duplicate token {t:?}")));
            }
            model.push_token(t.clone());
        }
        model.n_base = n_base;
        for (i, (l, r)) in merge_lines.iter().enumerate() {
            let (Some(&li), Some(&ri)) = (model.token_ids.get(l), model.token_ids.get(r)) else {
                return Err(fmt(format!("merge {l:?} {r:?} references unknown tokens")));
            };
            let expected = &tokens[n_base + i];
            if &format!("{l}{r}") != expected || model.token_ids.contains_key(expected) {
                return Err(fmt(format!("merge {i} does not produce vocab entry {expected:?}")));
            }
            model.push_merge((li, ri));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())
            .map_err(|source| TokenizerError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TokenizerError::Io { path: path.display().to_string(), source })?;
        Self::from_text(&text)
    }
}

/// Mean encoded couplet length, BOS/SEP/EOS included.
pub fn mean_couplet_tokens(model: &BpeModel, corpus: &[Couplet]) -> f64 {
    let lens = crate::par::map_slice(corpus, |c| model.encode_couplet(c).len());
    lens.iter().sum::<usize>() as f64 / corpus.len().max(1) as f64
}

/// Average couplet length at each vocabulary size. One model is trained at
/// the largest size and truncated for the others, which matches training at
/// each size separately because greedy merging is prefix-stable.
pub fn vocab_sweep(corpus: &[Couplet], sizes: &[usize]) -> Result<Vec<SweepPoint>, TokenizerError> {
    if sizes.is_empty() {
        return Ok(Vec::new());
    }
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(TokenizerError::InvalidConfig("sweep sizes must be ascending".into()));
    }
    if corpus.is_empty() {
        return Err(TokenizerError::InvalidConfig("sweep needs a non-empty corpus".into()));
    }
    let full = train_bpe(corpus, *sizes.last().expect("non-empty"))?;
    let models = sizes.iter().map(|&s| full.truncated(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(sizes
        .iter()
        .zip(&models)
        .map(|(&vocab_size, m)| SweepPoint { vocab_size, avg_tokens_per_couplet: mean_couplet_tokens(m, corpus) })
        .collect())
}

pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut s = String::from("vocab_size,avg_tokens\n");
    for p in points {
        let _ = writeln!(s, "{},{}", p.vocab_size, p.avg_tokens_per_couplet);
    }
    s
}
