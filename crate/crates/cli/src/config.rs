use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crfgen::corpus::SynthSpec;
use crfgen::eval::DEFAULT_DISCOUNT;
use crfgen::training::TrainConfig;
use crfgen::{Error, Result};

/// Everything a run needs. Loaded from TOML, then overridden by flags.
///
/// The top-level `seed` is the only seed: it replaces `train.seed` and the
/// synthetic corpus seed when the configuration is resolved.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusOptions,
    pub train: TrainConfig,
    pub generate: GenerateOptions,
    pub eval: EvalOptions,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusSource {
    #[default]
    Synthetic,
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusOptions {
    pub source: CorpusSource,
    /// Plain-text corpus for `source = "text"`.
    pub input: Option<PathBuf>,
    /// Training sentences to synthesize.
    pub sentences: usize,
    /// Sentences set aside as held-out data.
    pub heldout: usize,
    /// Banded preset: hidden states, words, end probability.
    pub states: usize,
    pub words: usize,
    pub eos_prob: f64,
    /// Explicit HMM; replaces the banded preset when present.
    pub synth: Option<SynthSpec>,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            source: CorpusSource::Synthetic,
            input: None,
            sentences: 20_000,
            heldout: 2_000,
            states: 5,
            words: 50,
            eos_prob: 0.2,
            synth: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthMode {
    #[default]
    Histogram,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateOptions {
    pub n: usize,
    pub length: LengthMode,
    /// Chain length when `length = "fixed"`.
    pub fixed_length: usize,
    pub unary_only: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            n: 100_000,
            length: LengthMode::Histogram,
            fixed_length: 10,
            unary_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub discount: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            discount: DEFAULT_DISCOUNT,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Propagates the global seed and checks ranges.
    pub fn resolve(mut self) -> Result<RunConfig> {
        self.train.seed = self.seed;
        if let Some(spec) = &mut self.corpus.synth {
            spec.seed = self.seed;
        }
        self.train.validate()?;
        if !(self.eval.discount > 0.0 && self.eval.discount < 1.0) {
            return Err(Error::InvalidConfig("eval.discount must lie in (0, 1)".into()));
        }
        if self.generate.n == 0 || self.generate.fixed_length == 0 {
            return Err(Error::InvalidConfig(
                "generate.n and generate.fixed_length must be positive".into(),
            ));
        }
        Ok(self)
    }

    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let c = &self.corpus;
        let spec = match &c.synth {
            Some(spec) => spec.clone(),
            None => {
                if c.states < 2 || c.words < c.states || !(0.0..=1.0).contains(&c.eos_prob) {
                    return Err(Error::InvalidConfig(
                        "corpus.states ≥ 2, corpus.words ≥ corpus.states and eos_prob in [0, 1] are required".into(),
                    ));
                }
                SynthSpec::banded(c.states, c.words, c.eos_prob, self.train.max_len, self.seed)
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
