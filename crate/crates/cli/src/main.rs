//! `versegen`: corpus preparation, BPE, training, decoding and scoring.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ConfigError, RunConfig};

macro_rules! flag_group {
    ($name:ident { $($(#[doc = $doc:literal])* $field:ident),* $(,)? }) => {
        #[derive(Args, Debug, Default, Clone)]
        pub struct $name {
            $(
                $(#[doc = $doc])*
                #[arg(long, value_name = "VALUE")]
                pub $field: Option<String>,
            )*
        }

        impl $name {
            pub fn overrides(&self) -> Vec<(&'static str, String)> {
                let mut v = Vec::new();
                $(
                    if let Some(x) = &self.$field {
                        v.push((stringify!($field), x.clone()));
                    }
                )*
                v
            }
        }
    };
}

flag_group!(SourceFlags {
    /// Poem source: local JSON/JSONL file, http(s) URL, or `bundled`
    source,
    /// Pages to request from a paged HTTP source
    page_limit,
    /// Value substituted for `{page_size}` in HTTP sources
    page_size,
});

flag_group!(PrepareFlags {
    /// Hemistich delimiter inside a body line (`\t` for tab)
    delimiter,
    /// Minimum shared suffix length for the rhyme filter
    min_suffix,
    /// Training share of the dataset split, strictly between 0 and 1
    ratio,
});

flag_group!(TokenizerFlags {
    /// Target BPE vocabulary size
    vocab_size,
});

flag_group!(SweepFlags {
    /// Comma-separated increasing vocabulary sizes
    sweep_sizes,
});

flag_group!(ModelFlags {
    d_model,
    n_layers,
    n_heads,
    ffn_hidden,
    /// Context window; 0 derives it from the training set
    context_len,
    dropout,
    /// Share the embedding matrix with the output projection
    tie_embeddings,
});

flag_group!(TrainFlags {
    epochs,
    batch_size,
    warmup_steps,
    beta1,
    beta2,
    adam_eps,
    /// Label smoothing factor
    smoothing,
    /// Global gradient-norm clip, or `off`
    clip_grad_norm,
    /// Keep one checkpoint per epoch
    epoch_checkpoints,
});

flag_group!(DecodeFlags {
    /// Top-K cutoff
    k,
    /// Nucleus mass
    p,
    /// Fixed temperature
    t,
    /// Annealing start temperature
    t0,
    /// Annealing floor temperature
    tf,
    /// Temperature decrease per generated token
    anneal_step,
    /// Anti-LM bigram penalty: `off`, `inf` or a non-negative number
    anti_lm,
    max_tokens,
    n_samples,
});

flag_group!(EvalFlags {
    /// `standard` (ten fixed recipes) or `config` (the decoding keys)
    recipes,
    /// Score against a seeded subsample of this many references (0 = all)
    ref_subsample,
});

flag_group!(GradFlags {
    /// Maximum allowed relative error
    grad_tolerance,
    /// Coordinates checked per tensor
    grad_coords,
});

flag_group!(SeedFlag {
    /// Seed for every random choice in the run
    seed,
});

#[derive(Parser, Debug)]
#[command(name = "versegen", about = "Train a small couplet transformer and sample from it", disable_version_flag = true)]
pub struct Cli {
    /// Flat `key = value` config file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Named bundle of settings applied under the config file
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,
    /// Worker threads for data-parallel sections
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Print tool and format versions
    #[arg(short = 'V', long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Download or copy poem records into a local JSONL file
    Fetch {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        source: SourceFlags,
    },
    /// Extract couplets, filter rhymes and split train/validation
    Prepare {
        /// Poem records (defaults to the `source` key)
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        source: SourceFlags,
        #[command(flatten)]
        prepare: PrepareFlags,
        #[command(flatten)]
        seed: SeedFlag,
    },
    /// Train a BPE tokenizer on the training couplets
    Tokenize {
        /// Directory written by `prepare`
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        tokenizer: TokenizerFlags,
    },
    /// Average tokens per couplet across vocabulary sizes
    SweepVocab {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        sweep: SweepFlags,
    },
    /// Train the transformer
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        tokenizer: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        seed: SeedFlag,
    },
    /// Sample couplets from a checkpoint
    Generate {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Defaults to `tokenizer.bpe` next to the checkpoint
        #[arg(long, value_name = "FILE")]
        tokenizer: Option<PathBuf>,
        /// Defaults to `generated/` next to the checkpoint
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Include the per-step trace in each record
        #[arg(long)]
        trace: bool,
        #[command(flatten)]
        decode: DecodeFlags,
        #[command(flatten)]
        seed: SeedFlag,
    },
    /// BLEU / Self-BLEU report
    Eval {
        /// Reference couplets (e.g. `validation.jsonl`)
        #[arg(long, value_name = "FILE")]
        references: PathBuf,
        /// Score an existing generation file instead of sampling
        #[arg(long, value_name = "FILE")]
        samples: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Defaults to `tokenizer.bpe` next to the checkpoint or samples
        #[arg(long, value_name = "FILE")]
        tokenizer: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        decode: DecodeFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        seed: SeedFlag,
    },
    /// Finite-difference gradient check on a freshly initialized model
    CheckGrads {
        #[arg(long, value_name = "DIR", default_value = "check-grads")]
        out: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        tokenizer: TokenizerFlags,
        #[command(flatten)]
        grad: GradFlags,
        #[command(flatten)]
        seed: SeedFlag,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Fetch { .. } => "fetch",
            Command::Prepare { .. } => "prepare",
            Command::Tokenize { .. } => "tokenize",
            Command::SweepVocab { .. } => "sweep-vocab",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Eval { .. } => "eval",
            Command::CheckGrads { .. } => "check-grads",
        }
    }

    fn overrides(&self) -> Vec<(&'static str, String)> {
        match self {
            Command::Fetch { source, .. } => source.overrides(),
            Command::Prepare { source, prepare, seed, .. } => [source.overrides(), prepare.overrides(), seed.overrides()].concat(),
            Command::Tokenize { tokenizer, .. } => tokenizer.overrides(),
            Command::SweepVocab { sweep, .. } => sweep.overrides(),
            Command::Train { model, train, seed, .. } => [model.overrides(), train.overrides(), seed.overrides()].concat(),
            Command::Generate { decode, seed, .. } => [decode.overrides(), seed.overrides()].concat(),
            Command::Eval { decode, eval, seed, .. } => [decode.overrides(), eval.overrides(), seed.overrides()].concat(),
            Command::CheckGrads { model, tokenizer, grad, seed, .. } => {
                [model.overrides(), tokenizer.overrides(), grad.overrides(), seed.overrides()].concat()
            }
        }
    }
}

pub fn version_text() -> String {
    format!(
        "versegen {} (checkpoint format {}, tokenizer format {}, manifest format {}, {} execution)",
        versegen::TOOL_VERSION,
        versegen::model::CHECKPOINT_VERSION,
        versegen::tokenizer::FORMAT_TAG,
        manifest::MANIFEST_FORMAT,
        if versegen::par::is_parallel() { "parallel" } else { "sequential" }
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.version {
        println!("{}", version_text());
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        eprintln!("error: no subcommand given; see `versegen --help`");
        return ExitCode::from(1);
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        versegen::par::set_threads(n);
    }
    let resolved = RunConfig::resolve(cli.preset.as_deref(), cli.config.as_deref(), &command.overrides());
    let config = match resolved {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let provenance = std::env::args().collect::<Vec<_>>().join(" ");
    match commands::run(command, &config, provenance) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
