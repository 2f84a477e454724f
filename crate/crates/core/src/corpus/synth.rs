use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// A discrete HMM that emits sentences.
///
/// `emission` rows have one column per entry of `words` plus a final column
/// for end-of-sentence. Emitting end-of-sentence stops the sentence;
/// reaching `max_len` words stops it as well.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub words: Vec<String>,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub emission: Vec<Vec<f64>>,
    pub max_len: usize,
    #[serde(default)]
    pub seed: u64,
}

const ROW_TOL: f64 = 1e-12;

impl SynthSpec {
    pub fn states(&self) -> usize {
        self.transition.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.transition.len();
        let err = |m: String| Err(Error::InvalidSynthSpec(m));
        if k == 0 {
            return err("no hidden states".into());
        }
        if self.words.is_empty() {
            return err("no words".into());
        }
        if self.max_len == 0 {
            return err("max_len must be positive".into());
        }
        if self.emission.len() != k || self.initial.len() != k {
            return err(format!(
                "{k} states but {} emission rows and {} initial entries",
                self.emission.len(),
                self.initial.len()
            ));
        }
        check_row("initial", &self.initial, k)?;
        for (i, row) in self.transition.iter().enumerate() {
            check_row(&format!("transition row {i}"), row, k)?;
        }
        for (i, row) in self.emission.iter().enumerate() {
            check_row(&format!("emission row {i}"), row, self.words.len() + 1)?;
        }
        Ok(())
    }

    /// Structured K-state HMM over `n_words` words `w00, w01, …`.
    ///
    /// State `k` emits from its own block of words with Zipf-shaped weights
    /// and never transitions to itself, so consecutive words always come from
    /// different blocks. Sentences start in the first `⌈K/2⌉` states, which
    /// never end a sentence; the remaining states end it with `eos_prob`.
    pub fn banded(states: usize, n_words: usize, eos_prob: f64, max_len: usize, seed: u64) -> SynthSpec {
        assert!(
            states >= 2 && n_words >= states,
            "need at least two states and one word per state"
        );
        let starters = states.div_ceil(2);
        let width = format!("{}", n_words - 1).len();
        let words: Vec<String> = (0..n_words).map(|i| format!("w{i:0width$}")).collect();
        let transition = (0..states)
            .map(|k| {
                let mut row = vec![0.0; states];
                let targets = [(1, 0.6), (2, 0.3), (3, 0.1)];
                for (step, p) in targets {
                    let mut j = (k + step) % states;
                    if j == k {
                        j = (k + 1) % states;
                    }
                    row[j] += p;
                }
                row
            })
            .collect();
        let emission = (0..states)
            .map(|k| {
                let mut row = vec![0.0; n_words + 1];
                let block: Vec<usize> = (0..n_words).filter(|w| w % states == k).collect();
                let z: f64 = (0..block.len()).map(|r| 1.0 / (r + 1) as f64).sum();
                let eos = if k < starters { 0.0 } else { eos_prob };
                for (r, &w) in block.iter().enumerate() {
                    row[w] = (1.0 - eos) / (r + 1) as f64 / z;
                }
                row[n_words] = eos;
                row
            })
            .collect();
        let initial = (0..states)
            .map(|k| if k < starters { 1.0 / starters as f64 } else { 0.0 })
            .collect();
        SynthSpec {
            words,
            initial,
            transition,
            emission,
            max_len,
            seed,
        }
    }
}

fn check_row(what: &str, row: &[f64], len: usize) -> Result<()> {
    if row.len() != len {
        return Err(Error::InvalidSynthSpec(format!(
            "{what} has {} entries, expected {len}",
            row.len()
        )));
    }
    if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
        return Err(Error::InvalidSynthSpec(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::InvalidSynthSpec(format!("{what} sums to {total}")));
    }
    Ok(())
}

fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left `u` above the cumulative total; take the last
    // non-zero entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Samples `n` sentences (word lists, no end marker). Sentence `i` uses
/// generator `i` of the spec's seed, so corpora of different sizes share a
/// prefix.
pub fn generate_synthetic(spec: &SynthSpec, n: usize) -> Result<Vec<Vec<String>>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidSynthSpec("sentence count must be positive".into()));
    }
    let stream = SeedStream::new(spec.seed).substream("synthetic-corpus");
    let eos = spec.words.len();
    let sentences = (0..n)
        .map(|i| {
            let mut rng = stream.rng_at(i as u64);
            let mut state = draw(&spec.initial, &mut rng);
            let mut out = Vec::new();
            while out.len() < spec.max_len {
                let sym = draw(&spec.emission[state], &mut rng);
                if sym == eos {
                    break;
                }
                out.push(spec.words[sym].clone());
                state = draw(&spec.transition[state], &mut rng);
            }
            out
        })
        .collect();
    Ok(sentences)
}
