use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crfgen::corpus::{
    build_vocab, encode_corpus, generate_synthetic, length_histogram, read_corpus, tokenize, unk_rate, write_corpus,
    Vocab,
};
use crfgen::eval::{fit_kn, Report};
use crfgen::training::{load_model, save_model, train as run_training, LengthSource, Model, TrainLog};
use crfgen::{Error, Result};

use crate::config::{CorpusSource, LengthMode, RunConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn prepare_dir(out: &Path, command: &str, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(format!("{command}.config.toml")), &cfg.to_toml())?;
    write_text(&out.join("VERSION"), &format!("crfgen {VERSION}\n"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn make_corpus(cfg: &RunConfig, out: &Path) -> Result<()> {
    let c = &cfg.corpus;
    let sentences = match c.source {
        CorpusSource::Synthetic => generate_synthetic(&cfg.synth_spec()?, c.sentences + c.heldout)?,
        CorpusSource::Text => {
            let input = c
                .input
                .as_deref()
                .ok_or_else(|| Error::InvalidConfig("corpus.input (--input) is required for text corpora".into()))?;
            read_text(input)?
                .lines()
                .map(tokenize)
                .filter(|s| !s.is_empty())
                .collect()
        }
    };
    if sentences.len() <= c.heldout {
        return Err(Error::InvalidConfig(format!(
            "{} sentences available but {} requested for held-out data",
            sentences.len(),
            c.heldout
        )));
    }
    let (train, heldout) = sentences.split_at(sentences.len() - c.heldout);
    let vocab = build_vocab(train, cfg.train.vocab_cap)?;
    prepare_dir(out, "make-corpus", cfg)?;
    write_corpus(&out.join("train.txt"), train)?;
    write_corpus(&out.join("heldout.txt"), heldout)?;
    write_text(&out.join("vocab.txt"), &vocab.to_file_string())?;
    eprintln!(
        "{} training and {} held-out sentences, {} vocabulary entries, training UNK rate {:.4}",
        train.len(),
        heldout.len(),
        vocab.len(),
        unk_rate(&vocab, train)
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, corpus: &Path, vocab: Option<&Path>, out: &Path) -> Result<()> {
    let sentences = read_corpus(corpus)?;
    let vocab = match vocab {
        Some(path) => Vocab::from_file_string(&read_text(path)?)?,
        None => build_vocab(&sentences, cfg.train.vocab_cap)?,
    };
    let encoded = encode_corpus(&vocab, &sentences, cfg.train.max_len);
    if encoded.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let lengths = length_histogram(&encoded)?;
    prepare_dir(out, "train", cfg)?;
    eprintln!(
        "training on {} of {} sentences (length cap {}), |V| = {}",
        encoded.len(),
        sentences.len(),
        cfg.train.max_len,
        vocab.len()
    );
    let mut model = Model::new(cfg.train.clone(), vocab.len())?;
    let last = out.join("last.ckpt");
    let log_path = out.join("train_log.csv");
    let mut partial = TrainLog::default();
    let log = run_training(&mut model, &encoded, |m, row| {
        eprintln!(
            "epoch {:>3}  elbo {:>10.4}  recon {:>10.4}  kl {:>8.4}  {:.1}s",
            row.epoch, row.elbo, row.recon, row.kl, row.seconds
        );
        partial.rows.push(*row);
        partial.write(&log_path)?;
        save_model(&last, m, Some(&vocab), Some(&lengths))
    })?;
    log.write(&log_path)?;
    save_model(&out.join("model.ckpt"), &model, Some(&vocab), Some(&lengths))
}

pub fn generate(cfg: &RunConfig, model_path: &Path, out: &Path) -> Result<()> {
    let bundle = load_model(model_path)?;
    let mut model = bundle.model;
    let vocab = bundle
        .vocab
        .ok_or_else(|| Error::Checkpoint(format!("{}: no vocabulary stored", model_path.display())))?;
    let g = &cfg.generate;
    let lengths = match g.length {
        LengthMode::Fixed => LengthSource::Fixed(g.fixed_length),
        LengthMode::Histogram => LengthSource::Histogram(bundle.lengths.ok_or_else(|| {
            Error::Checkpoint(format!(
                "{}: no length histogram stored; use --length",
                model_path.display()
            ))
        })?),
    };
    if g.unary_only {
        model.set_unary_only(true);
    }
    let seed = cfg.seed;
    let sentences = (0..g.n as u64)
        .into_par_iter()
        .map(|i| Ok(vocab.decode(&model.generate_one(&lengths, seed, i)?)))
        .collect::<Result<Vec<Vec<String>>>>()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        prepare_dir(dir, "generate", cfg)?;
    }
    write_corpus(out, &sentences)
}

pub fn eval(
    cfg: &RunConfig,
    train: &Path,
    samples: &[(String, PathBuf)],
    oracle: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let train_sents = read_corpus(train)?;
    let d = cfg.eval.discount;
    let lm2 = fit_kn(&train_sents, 2, d)?;
    let lm3 = fit_kn(&train_sents, 3, d)?;
    let mut sets: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    if let Some(path) = oracle {
        sets.push(("ORACLE".into(), read_corpus(path)?));
    }
    for (label, path) in samples {
        let sents = read_corpus(path)?;
        if sents.is_empty() {
            return Err(Error::InvalidConfig(format!("{}: no sentences", path.display())));
        }
        sets.push((label.clone(), sents));
    }
    let refs: Vec<(&str, &[Vec<String>])> = sets.iter().map(|(l, s)| (l.as_str(), s.as_slice())).collect();
    let report = Report::build(&lm2, &lm3, &refs)?;
    prepare_dir(out, "eval", cfg)?;
    lm2.save(&out.join("lm2.counts"))?;
    lm3.save(&out.join("lm3.counts"))?;
    let table = report.to_table();
    write_text(&out.join("report.txt"), &table)?;
    write_text(&out.join("report.jsonl"), &report.to_json_lines())?;
    print!("{table}");
    Ok(())
}

/// Prints one line per check; returns whether all passed.
pub fn selftest(seed: u64) -> Result<bool> {
    let checks = crfgen::selftest::run_all(seed);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}
