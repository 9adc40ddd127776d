use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the recognition pipeline.
///
/// Variants carry the machine-readable code used in reports and CLI output
/// (see [`Error::code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("participant counts {requested:?} do not sum to {available}")]
    CountMismatch { requested: [usize; 3], available: usize },

    #[error("degenerate box ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("track {track_id} has no keyframes")]
    NoKeyframes { track_id: u32 },

    #[error("rule for `{label}` needs {required} simultaneous objects but at most {max_tracks} tracks are allowed")]
    RuleUnsatisfiable { label: String, required: usize, max_tracks: usize },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("clip `{clip_id}` has {available} frames, {required} requested")]
    TooShort { clip_id: String, available: usize, required: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("branch dimension mismatch: {0}")]
    BranchDimMismatch(String),

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("description validation exhausted for `{label}` after {attempts} attempts: {last_failures:?}")]
    ValidationExhausted { label: String, attempts: usize, last_failures: Vec<String> },

    #[error("unknown action `{0}`")]
    UnknownAction(String),

    #[error("text encoder produced {got}-dim rows, expected {expected}")]
    EncoderDimMismatch { expected: usize, got: usize },

    #[error("prototype bank integrity check failed: {0}")]
    BankIntegrity(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("generator failed: {0}")]
    Generator(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::CountMismatch { .. } => "COUNT_MISMATCH",
            Error::DegenerateBox { .. } => "DEGENERATE_BOX",
            Error::NoKeyframes { .. } => "NO_KEYFRAMES",
            Error::RuleUnsatisfiable { .. } => "RULE_UNSATISFIABLE",
            Error::InvalidScenario(_) => "INVALID_SCENARIO",
            Error::TooShort { .. } => "TOO_SHORT",
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::DimMismatch(_) => "DIM_MISMATCH",
            Error::BranchDimMismatch(_) => "BRANCH_DIM_MISMATCH",
            Error::ConfigMismatch(_) => "CONFIG_MISMATCH",
            Error::CorruptCheckpoint(_) => "CORRUPT_CHECKPOINT",
            Error::ValidationExhausted { .. } => "VALIDATION_EXHAUSTED",
            Error::UnknownAction(_) => "UNKNOWN_ACTION",
            Error::EncoderDimMismatch { .. } => "ENCODER_DIM_MISMATCH",
            Error::BankIntegrity(_) => "BANK_INTEGRITY",
            Error::LabelOutOfRange { .. } => "LABEL_OUT_OF_RANGE",
            Error::EmptySplit => "EMPTY_SPLIT",
            Error::Diverged { .. } => "DIVERGED",
            Error::InvalidConfig(_) => "INVALID_CONFIG",
            Error::Generator(_) => "GENERATOR",
            Error::Io { .. } => "IO",
            Error::Json { .. } => "JSON",
            Error::Image { .. } => "IMAGE",
            Error::Tensor(_) => "TENSOR",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
