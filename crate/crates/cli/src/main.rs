//! `crfgen`: corpus preparation, training, generation, and evaluation.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "crfgen",
    version,
    about = "Latent state-space sentence generator with a chain CRF"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Global seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a corpus or ingest plain text; writes train/heldout/vocab files.
    MakeCorpus {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Plain-text corpus to ingest instead of synthesizing.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        sentences: Option<usize>,
        #[arg(long)]
        heldout: Option<usize>,
    },
    /// Train a model; writes checkpoints and the training log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training sentences, one per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Vocabulary file; built from the corpus when absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        state_dim: Option<usize>,
        #[arg(long)]
        kl_warmup: Option<u64>,
        /// Train the unary-only restriction.
        #[arg(long)]
        unary_only: bool,
    },
    /// Sample sentences from a checkpoint.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        /// Output text file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Use a fixed chain length instead of the training length histogram.
        #[arg(long)]
        length: Option<usize>,
        /// Sample with the pairwise potentials replaced by ones.
        #[arg(long)]
        unary_only: bool,
    },
    /// Fit Kneser-Ney judges on training data and score sample files.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Training sentences for the judges.
        #[arg(long)]
        train: PathBuf,
        /// Sample sets as LABEL=FILE.
        #[arg(long = "samples", value_parser = parse_labelled, required = true)]
        samples: Vec<(String, PathBuf)>,
        /// Held-out sentences reported as the ORACLE row.
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        discount: Option<f64>,
    },
    /// Run the built-in oracle and gradient-check suites.
    Selftest {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_labelled(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok((label.to_string(), PathBuf::from(path))),
        _ => Err(format!("expected LABEL=FILE, got {s:?}")),
    }
}

fn base_config(common: &Common) -> crfgen::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(command: Command) -> crfgen::Result<ExitCode> {
    match command {
        Command::MakeCorpus {
            common,
            out,
            input,
            sentences,
            heldout,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(input) = input {
                cfg.corpus.source = config::CorpusSource::Text;
                cfg.corpus.input = Some(input);
            }
            if let Some(n) = sentences {
                cfg.corpus.sentences = n;
            }
            if let Some(n) = heldout {
                cfg.corpus.heldout = n;
            }
            commands::make_corpus(&cfg.resolve()?, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            common,
            corpus,
            vocab,
            out,
            epochs,
            lr,
            batch_size,
            embed_dim,
            state_dim,
            kl_warmup,
            unary_only,
        } => {
            let mut cfg = base_config(&common)?;
            let t = &mut cfg.train;
            if let Some(v) = epochs {
                t.epochs = v;
            }
            if let Some(v) = lr {
                t.learning_rate = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            if let Some(v) = embed_dim {
                t.embed_dim = v;
            }
            if let Some(v) = state_dim {
                t.state_dim = v;
            }
            if let Some(v) = kl_warmup {
                t.kl_warmup = v;
            }
            if unary_only {
                t.unary_only = true;
            }
            commands::train(&cfg.resolve()?, &corpus, vocab.as_deref(), &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate {
            common,
            model,
            out,
            n,
            length,
            unary_only,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(n) = n {
                cfg.generate.n = n;
            }
            if let Some(t) = length {
                cfg.generate.length = config::LengthMode::Fixed;
                cfg.generate.fixed_length = t;
            }
            if unary_only {
                cfg.generate.unary_only = true;
            }
            commands::generate(&cfg.resolve()?, &model, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            common,
            train,
            samples,
            oracle,
            out,
            discount,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(d) = discount {
                cfg.eval.discount = d;
            }
            commands::eval(&cfg.resolve()?, &train, &samples, oracle.as_deref(), &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Selftest { common } => {
            let cfg = base_config(&common)?.resolve()?;
            let passed = commands::selftest(cfg.seed)?;
            Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("CRFGEN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("CRFGEN_THREADS must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("CRFGEN_THREADS: {e}"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
