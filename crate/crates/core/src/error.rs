use std::path::PathBuf;

use crate::optimizer::TraceRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid camera: scale must be positive, got {0}")]
    InvalidCamera(f64),

    #[error("degenerate shape: bone {joint} has non-positive length {length}")]
    DegenerateShape { joint: usize, length: f64 },

    #[error("numeric overflow while evaluating {0}")]
    NumericOverflow(&'static str),

    #[error("refinement diverged at iteration {iteration}")]
    Diverged {
        iteration: usize,
        trace: Vec<TraceRecord>,
    },

    #[error("training diverged: {0}")]
    TrainingDivergence(String),

    #[error("Procrustes alignment is degenerate (rank-deficient point set)")]
    AlignmentDegenerate,

    #[error("correlation undefined for constant input")]
    UndefinedCorrelation,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
