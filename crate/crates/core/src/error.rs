use thiserror::Error;
use vabs_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no chains parsed: {0}")]
    EmptyResult(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("unknown element '{0}'")]
    UnknownElement(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error("parameter '{name}': expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
