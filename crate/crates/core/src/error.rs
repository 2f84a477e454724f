use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty reduction")]
    EmptyReduction,

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid array: {0}")]
    InvalidArray(String),

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("numeric overflow in β recursion at step {step}")]
    NumericOverflow { step: usize },

    #[error("unreachable prefix: β_{step}({word}) is zero")]
    UnreachablePrefix { step: usize, word: usize },

    #[error("diagnostic-only operation: vocabulary of {size} exceeds the dense limit {limit}")]
    DiagnosticOnly { size: usize, limit: usize },

    #[error("instance too large for enumeration: {0} sequences")]
    InstanceTooLarge(f64),

    #[error("token id {id} out of vocabulary of size {size}")]
    OutOfVocabulary { id: usize, size: usize },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite {component} value")]
    NonFinite { component: &'static str },

    #[error("language model: {0}")]
    LanguageModel(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures caused by numerics rather than by inputs or usage.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NumericOverflow { .. } | Error::NonFinite { .. } | Error::UnreachablePrefix { .. }
        )
    }
}
