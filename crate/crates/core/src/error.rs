use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("unsupported data type: {0}")]
    UnsupportedDtype(String),

    #[error("invalid voxel spacing {0:?}: every component must be finite and > 0")]
    InvalidSpacing([f64; 3]),

    #[error("grid mismatch: expected {expected:?}, found {found:?}")]
    GridMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("grid {dims:?} is not divisible by {factor}")]
    NotDivisible { dims: [usize; 3], factor: usize },

    #[error("unknown class id {0}")]
    UnknownClass(u32),

    #[error("class set is empty")]
    EmptyClassSet,

    #[error("vocabulary is empty")]
    EmptyVocabulary,

    #[error("label map is inconsistent: {0}")]
    InconsistentLabels(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step} (lr {lr}, cases {cases:?})")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        cases: Vec<String>,
    },

    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),

    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),

    #[error("could not place structure for class {class} after {attempts} attempts")]
    Placement { class: u32, attempts: usize },

    #[error("dataset has no label hierarchy")]
    MissingHierarchy,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv/report error: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn grid(expected: &[usize], found: &[usize]) -> Self {
        Error::GridMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}
