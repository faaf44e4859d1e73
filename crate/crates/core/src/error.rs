use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: String,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("classifier for atom {atom} diverged")]
    ClassifierDiverged { atom: usize },

    #[error("transport failure in round {round} (sender {sender}): {reason}")]
    Transport {
        round: usize,
        sender: String,
        reason: String,
    },

    #[error("{path}, line {line}: {reason}")]
    Csv {
        path: String,
        line: u64,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: impl Into<String>, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            left,
            right,
        }
    }
}
