use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("non-finite function value at parameter index {index} (f = {value})")]
    NonFiniteValue { index: usize, value: f64 },

    #[error("non-positive margin")]
    NonPositiveMargin,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsatisfiable spec")]
    UnsatisfiableSpec,

    #[error("unidentifiable noise")]
    UnidentifiableNoise,

    #[error("unnormalized box")]
    UnnormalizedBox,

    #[error("additive-bound precondition violated (a must be positive, got {0})")]
    NonPositiveMinMargin(f64),

    #[error("training diverged at step {step}: loss trace {trace:?}")]
    Diverged { step: usize, trace: Vec<f64> },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("dataset error at {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dataset(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Dataset {
            path: path.into(),
            message: message.into(),
        }
    }
}
