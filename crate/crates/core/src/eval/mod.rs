//! Sample-quality evaluation: Kneser-Ney perplexity judges and repetition,
//! length, and uniqueness statistics.

mod kn;

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::Serialize;

pub use kn::{fit_kn, KneserNeyLm};

use crate::error::{Error, Result};

/// Default absolute discount of the judges.
pub const DEFAULT_DISCOUNT: f64 = 0.75;

/// `exp` of the mean negative log-probability per token, `</s>` included.
pub fn perplexity<S: AsRef<str>>(lm: &KneserNeyLm, sentences: &[Vec<S>]) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (mut total, mut n) = (0.0, 0usize);
    for s in sentences {
        let (lp, k) = lm.sentence_logprob(s);
        total += lp;
        n += k;
    }
    Ok((-total / n as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GenStats {
    /// Percentage of tokens equal to their predecessor.
    pub rho_rep: f64,
    /// Mean words per sentence, `</s>` excluded.
    pub length: f64,
    /// Percentage of distinct sentences.
    pub rho_uni: f64,
    pub count: usize,
}

pub fn gen_stats<S: AsRef<str>>(sentences: &[Vec<S>]) -> Result<GenStats> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut tokens = 0usize;
    let mut repeats = 0usize;
    let mut distinct: HashSet<Vec<&str>> = HashSet::new();
    for s in sentences {
        let words: Vec<&str> = s.iter().map(AsRef::as_ref).collect();
        tokens += words.len();
        repeats += words.windows(2).filter(|w| w[0] == w[1]).count();
        distinct.insert(words);
    }
    let n = sentences.len() as f64;
    Ok(GenStats {
        rho_rep: if tokens == 0 {
            0.0
        } else {
            100.0 * repeats as f64 / tokens as f64
        },
        length: tokens as f64 / n,
        rho_uni: 100.0 * distinct.len() as f64 / n,
        count: sentences.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub ppl2: f64,
    pub ppl3: f64,
    pub rho_rep: f64,
    pub length: f64,
    pub rho_uni: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    /// One row per labelled sample set, each judged by `lm2` and `lm3`.
    pub fn build<S: AsRef<str>>(lm2: &KneserNeyLm, lm3: &KneserNeyLm, sets: &[(&str, &[Vec<S>])]) -> Result<Report> {
        let rows = sets
            .iter()
            .map(|(label, sents)| {
                let stats = gen_stats(sents)?;
                Ok(ReportRow {
                    label: label.to_string(),
                    ppl2: perplexity(lm2, sents)?,
                    ppl3: perplexity(lm3, sents)?,
                    rho_rep: stats.rho_rep,
                    length: stats.length,
                    rho_uni: stats.rho_uni,
                    count: stats.count,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Report { rows })
    }

    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut s = format!(
            "{:<width$}  {:>10}  {:>10}  {:>7}  {:>6}  {:>7}  {:>8}\n",
            "MODEL", "PPL_2", "PPL_3", "REP%", "LEN", "UNI%", "N"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>10.2}  {:>10.2}  {:>7.2}  {:>6.2}  {:>7.2}  {:>8}",
                r.label, r.ppl2, r.ppl3, r.rho_rep, r.length, r.rho_uni, r.count
            );
        }
        s
    }

    /// One JSON object per row.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            s.push_str(&serde_json::to_string(r).expect("row serializes"));
            s.push('\n');
        }
        s
    }
}
