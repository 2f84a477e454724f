use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig};
use crate::compute::checkpoint::{self, array_to_bytes, bytes_to_array};
use crate::compute::{Array, ParamSet};
use crate::corpus::{LengthHistogram, Vocab};
use crate::error::{Error, Result};

const META_CONFIG: &str = "meta.config";
const META_VOCAB: &str = "meta.vocab";
const META_LENGTHS: &str = "meta.length_hist";

#[derive(Serialize, Deserialize)]
struct StoredConfig {
    vocab_size: usize,
    train: TrainConfig,
}

/// Everything a checkpoint carries.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub model: Model,
    pub vocab: Option<Vocab>,
    pub lengths: Option<LengthHistogram>,
}

/// Writes parameters plus metadata atomically (temporary file, then rename).
pub fn save_model(path: &Path, model: &Model, vocab: Option<&Vocab>, lengths: Option<&LengthHistogram>) -> Result<()> {
    let stored = StoredConfig {
        vocab_size: model.vocab_size,
        train: model.config.clone(),
    };
    let config = bytes_to_array(&serde_json::to_vec(&stored).expect("config serializes"));
    let vocab = bytes_to_array(vocab.map(Vocab::to_file_string).unwrap_or_default().as_bytes());
    let lengths = lengths.map(|h| Array::vector(h.to_dense()));
    let mut tensors: Vec<(&str, &Array)> = model.params.iter().collect();
    tensors.push((META_CONFIG, &config));
    tensors.push((META_VOCAB, &vocab));
    if let Some(l) = &lengths {
        tensors.push((META_LENGTHS, l));
    }
    checkpoint::save(path, &tensors)
}

pub fn load_model(path: &Path) -> Result<Bundle> {
    let mut params = ParamSet::new();
    let (mut config, mut vocab, mut lengths) = (None, None, None);
    for (name, array) in checkpoint::load(path)? {
        match name.as_str() {
            META_CONFIG => {
                let bytes = array_to_bytes(&array)?;
                let stored: StoredConfig = serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Checkpoint(format!("{}: bad {META_CONFIG}: {e}", path.display())))?;
                config = Some(stored);
            }
            META_VOCAB => {
                let bytes = array_to_bytes(&array)?;
                if !bytes.is_empty() {
                    let text = String::from_utf8(bytes)
                        .map_err(|_| Error::Checkpoint(format!("{}: vocabulary is not UTF-8", path.display())))?;
                    vocab = Some(Vocab::from_file_string(&text)?);
                }
            }
            META_LENGTHS => lengths = Some(LengthHistogram::from_dense(array.data())?),
            _ => {
                params.insert(name, array);
            }
        }
    }
    let stored = config.ok_or_else(|| Error::Checkpoint(format!("{}: missing {META_CONFIG}", path.display())))?;
    if let Some(v) = &vocab {
        if v.len() != stored.vocab_size {
            return Err(Error::Checkpoint(format!(
                "{}: embedded vocabulary has {} entries, model expects {}",
                path.display(),
                v.len(),
                stored.vocab_size
            )));
        }
    }
    let model = Model::from_params(stored.train, stored.vocab_size, params)?;
    Ok(Bundle { model, vocab, lengths })
}
