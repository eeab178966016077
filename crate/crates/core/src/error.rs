use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("model emitted the end token before any answer token")]
    EmptyGeneration,

    #[error("adapter returned a non-finite or positive log-probability {value} at token {index}")]
    NonFiniteLogProb { index: usize, value: f64 },

    #[error("selected token set is empty")]
    EmptySelection,

    #[error("selected index {index} is out of range for an answer of length {len}")]
    SelectionOutOfRange { index: usize, len: usize },

    #[error("answer has a single token; the first token is excluded from selection")]
    DegenerateAnswer,

    #[error("unknown baseline kind '{0}'")]
    UnknownKind(String),

    #[error("rectangle {0:?} lies outside the image bounds")]
    OutOfBounds((usize, usize, usize, usize)),

    #[error("adapter does not support gradients")]
    GradientUnsupported,

    #[error("objective became non-finite at step {step}")]
    NonFiniteObjective { step: usize },

    #[error("original and baseline scores coincide ({0}); the sample cannot be normalized")]
    NormalizationDegenerate(f64),

    #[error("reliance statistics cover mismatched sample sets: {0}")]
    MismatchedSampleSets(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot tokenize answer: {0}")]
    Tokenize(String),
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }
}
