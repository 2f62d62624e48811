//! Flat run configuration: built-in defaults, then an optional preset, then a
//! `key = value` file, then command-line flags. Every resolved value is
//! checked by its owning module before a subcommand does any work.

use std::collections::BTreeMap;
use std::path::Path;

use versegen::corpus;
use versegen::decoding::{AntiLm, DecodeConfig, TemperatureMode};
use versegen::model::ModelConfig;
use versegen::trainer::TrainConfig;

/// A configuration problem; maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(key: &str, msg: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("invalid value for `{key}`: {msg}"))
}

/// `(key, default)`. An empty default means unset.
pub const KEYS: &[(&str, &str)] = &[
    // corpus
    ("source", ""),
    ("page_limit", "1"),
    ("page_size", "100"),
    ("delimiter", "\\t"),
    ("min_suffix", "2"),
    ("ratio", "0.95"),
    // tokenizer
    ("vocab_size", "8000"),
    ("sweep_sizes", "1000,2000,4000,8000,16000"),
    // model
    ("d_model", "512"),
    ("n_layers", "8"),
    ("n_heads", "8"),
    ("ffn_hidden", "2048"),
    ("context_len", "64"),
    ("dropout", "0.1"),
    ("tie_embeddings", "false"),
    // trainer
    ("epochs", "12"),
    ("batch_size", "32"),
    ("warmup_steps", "4000"),
    ("beta1", "0.9"),
    ("beta2", "0.98"),
    ("adam_eps", "1e-9"),
    ("smoothing", "0.1"),
    ("clip_grad_norm", "off"),
    ("epoch_checkpoints", "true"),
    // decoding
    ("k", "20"),
    ("p", "0.9"),
    ("t", ""),
    ("t0", ""),
    ("tf", ""),
    ("anneal_step", ""),
    ("anti_lm", "inf"),
    ("max_tokens", "64"),
    ("seed", "0"),
    // eval
    ("n_samples", "1000"),
    ("recipes", "standard"),
    ("ref_subsample", "0"),
    // gradient check
    ("grad_tolerance", "1e-4"),
    ("grad_coords", "20"),
];

pub const PRESETS: &[&str] = &["tiny"];

/// Desk-scale bundle: the bundled sample corpus, |V| = 64 and a model small
/// enough to memorize the 32 training couplets in seconds.
const TINY: &[(&str, &str)] = &[
    ("source", "bundled"),
    ("vocab_size", "64"),
    ("sweep_sizes", "64,128,256,512"),
    ("d_model", "32"),
    ("n_layers", "1"),
    ("n_heads", "2"),
    ("ffn_hidden", "128"),
    ("context_len", "0"),
    ("dropout", "0"),
    ("epochs", "300"),
    ("batch_size", "8"),
    ("warmup_steps", "100"),
    ("smoothing", "0"),
    ("epoch_checkpoints", "false"),
    ("max_tokens", "128"),
    ("n_samples", "200"),
];

fn preset(name: &str) -> Result<&'static [(&'static str, &'static str)], ConfigError> {
    match name {
        "tiny" => Ok(TINY),
        other => Err(ConfigError(format!("unknown preset `{other}` (available: {})", PRESETS.join(", ")))),
    }
}

pub fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("config line {}: expected `key = value`, got {line:?}", i + 1)))?;
        let k = k.trim();
        if !is_known(k) {
            return Err(ConfigError(format!("config line {}: unknown key `{k}`", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Applies the layers in precedence order and validates the result.
    pub fn resolve(
        preset_name: Option<&str>,
        config_file: Option<&Path>,
        flags: &[(&str, String)],
    ) -> Result<Self, ConfigError> {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(name) = preset_name {
            for (k, v) in preset(name)? {
                values.insert(k.to_string(), v.to_string());
            }
        }
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config file {}: {e}", path.display())))?;
            values.extend(parse_config_text(&text)?);
        }
        for (k, v) in flags {
            debug_assert!(is_known(k), "flag {k} has no config key");
            values.insert(k.to_string(), v.clone());
        }
        let cfg = Self { values };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>().map_err(|e| invalid(key, format!("{raw:?} ({e})")))
    }

    fn optional_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.raw(key) {
            "" => Ok(None),
            _ => self.parse(key).map(Some),
        }
    }

    fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(invalid(key, format!("{other:?} is not a boolean"))),
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        self.delimiter()?;
        let ms: usize = self.parse("min_suffix")?;
        if ms == 0 {
            return Err(invalid("min_suffix", "must be at least 1"));
        }
        self.ratio()?;
        self.parse::<usize>("page_limit")?;
        self.parse::<usize>("page_size")?;
        let v: usize = self.parse("vocab_size")?;
        if v <= versegen::tokenizer::RESERVED {
            return Err(invalid("vocab_size", format!("must exceed the {} reserved ids", versegen::tokenizer::RESERVED)));
        }
        self.sweep_sizes()?;
        self.model_config()?;
        self.train_config()?;
        self.decode_config()?;
        let n: usize = self.parse("n_samples")?;
        if n == 0 {
            return Err(invalid("n_samples", "must be at least 1"));
        }
        match self.raw("recipes") {
            "standard" | "config" => {}
            other => return Err(invalid("recipes", format!("{other:?} is not one of standard, config"))),
        }
        self.parse::<usize>("ref_subsample")?;
        let tol: f64 = self.parse("grad_tolerance")?;
        if tol.is_nan() || tol <= 0.0 {
            return Err(invalid("grad_tolerance", "must be positive"));
        }
        self.parse::<usize>("grad_coords")?;
        Ok(())
    }

    pub fn delimiter(&self) -> Result<String, ConfigError> {
        let d = self.raw("delimiter").replace("\\t", "\t");
        if d.is_empty() {
            return Err(invalid("delimiter", "must be non-empty"));
        }
        Ok(d)
    }

    pub fn min_suffix(&self) -> usize {
        self.parse("min_suffix").expect("validated")
    }

    pub fn ratio(&self) -> Result<f64, ConfigError> {
        let r: f64 = self.parse("ratio")?;
        if !(r > 0.0 && r < 1.0) {
            return Err(invalid("ratio", format!("{r} must lie strictly between 0 and 1")));
        }
        Ok(r)
    }

    pub fn seed(&self) -> u64 {
        self.parse("seed").expect("validated")
    }

    pub fn usize(&self, key: &str) -> usize {
        self.parse(key).expect("validated")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.parse(key).expect("validated")
    }

    pub fn fetch_options(&self) -> corpus::FetchOptions {
        corpus::FetchOptions {
            page_limit: self.usize("page_limit"),
            page_size: self.usize("page_size"),
            ..corpus::FetchOptions::default()
        }
    }

    pub fn sweep_sizes(&self) -> Result<Vec<usize>, ConfigError> {
        let sizes = self
            .raw("sweep_sizes")
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|e| invalid("sweep_sizes", format!("{s:?} ({e})"))))
            .collect::<Result<Vec<_>, _>>()?;
        if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("sweep_sizes", "must be a strictly increasing list"));
        }
        Ok(sizes)
    }

    /// Model shape; `vocab_size` comes from the `vocab_size` key and is
    /// replaced by the tokenizer's size at train time.
    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let cfg = ModelConfig {
            d_model: self.parse("d_model")?,
            n_layers: self.parse("n_layers")?,
            n_heads: self.parse("n_heads")?,
            ffn_hidden: self.parse("ffn_hidden")?,
            vocab_size: self.parse("vocab_size")?,
            context_len: self.parse("context_len")?,
            dropout: self.parse("dropout")?,
            tie_embeddings: self.flag("tie_embeddings")?,
        };
        // context_len 0 means "derive from the data"; check the rest with a
        // placeholder so validation still runs before any work.
        let probe = ModelConfig { context_len: cfg.context_len.max(1), ..cfg.clone() };
        probe.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let clip = match self.raw("clip_grad_norm") {
            "off" | "" => None,
            _ => Some(self.parse("clip_grad_norm")?),
        };
        let cfg = TrainConfig {
            beta1: self.parse("beta1")?,
            beta2: self.parse("beta2")?,
            adam_eps: self.parse("adam_eps")?,
            warmup_steps: self.parse("warmup_steps")?,
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            smoothing: self.parse("smoothing")?,
            seed: self.parse("seed")?,
            clip_grad_norm: clip,
            epoch_checkpoints: self.flag("epoch_checkpoints")?,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }

    /// Fixed temperature unless any of `t0`, `tf`, `anneal_step` is set, in
    /// which case all three are required and `t` must be unset.
    pub fn decode_config(&self) -> Result<DecodeConfig, ConfigError> {
        let t = self.optional_f64("t")?;
        let t0 = self.optional_f64("t0")?;
        let tf = self.optional_f64("tf")?;
        let step = self.optional_f64("anneal_step")?;
        let temperature = match (t0, tf, step) {
            (None, None, None) => TemperatureMode::Fixed { t: t.unwrap_or(1.0) },
            (Some(t0), Some(tf), Some(step)) => {
                if t.is_some() {
                    return Err(ConfigError("`t` cannot be combined with the annealing keys t0, tf, anneal_step".into()));
                }
                TemperatureMode::Annealed { t0, tf, step }
            }
            _ => return Err(ConfigError("annealing needs all of t0, tf and anneal_step".into())),
        };
        let anti_lm = AntiLm::parse(self.raw("anti_lm")).map_err(|e| invalid("anti_lm", e))?;
        let cfg = DecodeConfig {
            k: self.parse("k")?,
            p: self.parse("p")?,
            temperature,
            anti_lm,
            max_tokens: self.parse("max_tokens")?,
            seed: self.parse("seed")?,
        };
        cfg.validate().map_err(|e| ConfigError(e.to_string()))?;
        Ok(cfg)
    }
}
