use std::path::PathBuf;

use thiserror::Error;

use crate::nn::Group;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit reports. Variant names follow the error codes
/// used across the public operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in input")]
    NonFiniteInput,
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("optimizer is {actual}, expected {expected}")]
    WrongOptimizer { expected: &'static str, actual: &'static str },
    #[error("invalid band {low} - {high} Hz")]
    InvalidBand { low: f64, high: f64 },
    #[error("band edge {high} Hz violates Nyquist limit {nyquist} Hz")]
    NyquistViolation { high: f64, nyquist: f64 },
    #[error("invalid standardization factor {0}")]
    InvalidFactor(f64),
    #[error("cannot decimate {from} Hz to {to} Hz by an integer factor")]
    NonIntegerFactor { from: f64, to: f64 },
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("channel `{0}` requested twice")]
    DuplicateChannel(String),
    #[error("class {class} has no epochs left for the test split")]
    ClassTooSmall { class: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("bad configuration: {0}")]
    BadConfig(String),
    #[error("no tasks given")]
    EmptyTasks,
    #[error("outlier removal would drop all {0} tasks")]
    AllRemoved(usize),
    #[error("model has an empty {0} group")]
    GroupMissing(Group),
    #[error("search space has no dimensions")]
    EmptySpace,
    #[error("objective failed: {0}")]
    ObjectiveFailed(String),
    #[error("trial pruned at checkpoint {0}")]
    Pruned(usize),
    #[error("test set is empty")]
    EmptyTest,
    #[error("need at least 5 non-zero paired differences, got {0}")]
    TooFewPairs(usize),
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifact from an earlier stage: {0}")]
    MissingStage(String),
    #[error("run directory {0} is locked by another process (remove the lock file if that process is gone)")]
    Locked(PathBuf),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
