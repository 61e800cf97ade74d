use thiserror::Error;

/// Errors produced by the feature selection toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for query {qid} with {len} documents")]
    IndexOutOfRange {
        qid: String,
        index: usize,
        len: usize,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Divergence {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("no feature group survived pruning")]
    NoSurvivingGroups,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
