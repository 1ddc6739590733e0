use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An arithmetic primitive was applied outside its domain (log of a
    /// non-positive number, division by zero, overflow to infinity).
    #[error("domain violation in {op}: argument {value}")]
    Domain { op: &'static str, value: f64 },

    #[error("{0}: input is empty")]
    Empty(&'static str),

    #[error("invalid {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("{what} = {value} is outside [{min}, {max}]")]
    OutOfRange {
        what: &'static str,
        value: usize,
        min: usize,
        max: usize,
    },

    #[error("maxDCG@{k} is zero: every gain in the top-{k} labels is zero")]
    ZeroNormalizer { k: usize },

    #[error("sinkhorn scaling did not converge in {iters} iterations (residual {residual:e})")]
    SinkhornDiverged { iters: usize, residual: f64 },

    #[error("labels are not sorted in descending order at position {index}")]
    UnsortedLabels { index: usize },

    #[error("label {value} is outside [0, 1]")]
    LabelOutOfRange { value: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    OutOfVocabulary { token: u32, vocab: usize },

    #[error("sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite loss at step {step} (list {list_id:?})")]
    NonFiniteLoss { step: usize, list_id: String },

    #[error("missing oracle utility for response {0:?}")]
    MissingOracle(String),

    #[error("scorer does not match the dataset: {0}")]
    ScorerMismatch(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Errors caused by arithmetic rather than by bad inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Domain { .. }
                | Error::SinkhornDiverged { .. }
                | Error::NonFiniteLoss { .. }
        )
    }
}
