//! Crate-wide error type. Every fallible public operation returns [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or node shapes are incompatible for the requested operation.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A graph input node has no feed bound for evaluation.
    #[error("missing feed for input node {0}")]
    MissingFeed(usize),

    /// A node id does not belong to the graph it was used with.
    #[error("node id {0} out of bounds for this graph")]
    BadNodeId(usize),

    /// A scalar was required (e.g. a loss node) but the tensor is not 1-element.
    #[error("expected scalar in {0}")]
    NotScalar(String),

    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A metric or training routine needs both classes present.
    #[error("single-class input: {0}")]
    SingleClass(String),

    /// An operation received an empty collection it cannot work with.
    #[error("empty input: {0}")]
    Empty(String),

    /// Non-finite values were produced or supplied where finite ones are required.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Checkpoint bytes do not parse or carry an unsupported version.
    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    /// A corpus directory or manifest cannot be interpreted.
    #[error("corpus: {0}")]
    Corpus(String),

    #[error("image codec: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
