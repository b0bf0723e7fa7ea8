use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = ActuneError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum ActuneError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad embedding file: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("label {label} for sample {index} is out of range for {class_count} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        class_count: usize,
    },

    #[error("sample index {index} is out of range (n = {n})")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("duplicate sample index {0} in label file")]
    DuplicateIndex(usize),

    #[error("bad label file: {0}")]
    LabelFile(String),

    #[error("no label source available: {0}")]
    NoLabelSource(String),

    #[error("sample {0} is already labeled")]
    AlreadyLabeled(usize),

    #[error("invalid probability vector: {0}")]
    InvalidSimplex(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("memory bank: {0}")]
    Bank(String),

    #[error("training diverged (loss = {0})")]
    Diverged(f64),

    #[error("no labeled samples to train on")]
    EmptyLabeledSet,

    #[error("unlabeled pool is exhausted")]
    Exhausted,

    #[error("round {round} is waiting for {missing} labels")]
    AwaitingLabels { round: usize, missing: usize },

    #[error("sample {0} is not in the pending query batch")]
    NotInBatch(usize),

    #[error("sample {index} already has label {existing}; refusing {submitted}")]
    LabelConflict {
        index: usize,
        existing: usize,
        submitted: usize,
    },

    #[error("no round is pending")]
    NoPendingRound,

    #[error("all {0} rounds are complete")]
    Finished(usize),

    #[error("corrupt snapshot: {0}")]
    Corrupt(String),

    #[error("snapshot format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

impl ActuneError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ActuneError::Io {
            path: path.into(),
            source,
        }
    }
}
