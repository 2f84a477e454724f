//! Vocabulary, plain-text ingestion, encoding, and synthetic corpora.

mod synth;
mod vocab;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

pub use synth::{generate_synthetic, SynthSpec};
pub use vocab::{build_vocab, unk_rate, TokenSeq, Vocab, BOS, EOS, RESERVED, UNK};

use crate::error::{Error, Result};

/// Lowercased whitespace tokenization of one line.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_lowercase).collect()
}

/// Reads a UTF-8 corpus, one sentence per line; blank lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(tokenize).filter(|s| !s.is_empty()).collect())
}

pub fn write_corpus<S: AsRef<str>>(path: &Path, sentences: &[Vec<S>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        let line: Vec<&str> = s.iter().map(AsRef::as_ref).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Encodes every sentence, dropping those longer than `max_len`.
pub fn encode_corpus<S: AsRef<str>>(vocab: &Vocab, sentences: &[Vec<S>], max_len: usize) -> Vec<TokenSeq> {
    sentences.iter().filter_map(|s| vocab.encode(s, max_len)).collect()
}

/// Empirical distribution of sentence lengths T (end marker included).
#[derive(Clone, Debug, PartialEq)]
pub struct LengthHistogram {
    probs: BTreeMap<usize, f64>,
}

impl LengthHistogram {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
        let mut total = 0u64;
        for l in lengths {
            if l == 0 {
                return Err(Error::InvalidSequence("zero-length sentence".into()));
            }
            *counts.entry(l).or_default() += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::EmptyCorpus);
        }
        let probs = counts.into_iter().map(|(l, c)| (l, c as f64 / total as f64)).collect();
        Ok(LengthHistogram { probs })
    }

    /// Builds from explicit probabilities, renormalizing them.
    pub fn from_probs(probs: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let probs: BTreeMap<usize, f64> = probs.into_iter().filter(|(_, p)| *p > 0.0).collect();
        let total: f64 = probs.values().sum();
        if probs.is_empty() || !total.is_finite() || probs.contains_key(&0) {
            return Err(Error::InvalidConfig("length distribution is empty or invalid".into()));
        }
        Ok(LengthHistogram {
            probs: probs.into_iter().map(|(l, p)| (l, p / total)).collect(),
        })
    }

    pub fn probs(&self) -> &BTreeMap<usize, f64> {
        &self.probs
    }

    pub fn prob(&self, len: usize) -> f64 {
        self.probs.get(&len).copied().unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.probs.iter().map(|(&l, &p)| l as f64 * p).sum()
    }

    pub fn max_len(&self) -> usize {
        *self.probs.keys().next_back().expect("histogram is never empty")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (&l, &p) in &self.probs {
            acc += p;
            if u < acc {
                return l;
            }
        }
        self.max_len()
    }

    /// Dense vector indexed by length, for storage.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.max_len() + 1];
        for (&l, &p) in &self.probs {
            v[l] = p;
        }
        v
    }

    pub fn from_dense(v: &[f64]) -> Result<Self> {
        LengthHistogram::from_probs(v.iter().copied().enumerate())
    }
}

pub fn length_histogram(corpus: &[TokenSeq]) -> Result<LengthHistogram> {
    LengthHistogram::from_lengths(corpus.iter().map(TokenSeq::len))
}
