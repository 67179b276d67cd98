use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected {expected} values, got {actual}")]
    WrongLength { expected: usize, actual: usize },

    #[error("cannot fit a scaler on zero frames")]
    EmptyInput,

    #[error("scaler has not been fitted")]
    NotFitted,

    #[error("image has a zero dimension ({height}x{width})")]
    EmptyImage { height: usize, width: usize },

    #[error("frame sequence is empty")]
    EmptySequence,

    #[error("missing image {0}")]
    MissingImage(PathBuf),

    #[error("malformed csv {path}: {reason}")]
    MalformedCsv { path: PathBuf, reason: String },

    #[error("unexpected corpus layout at {path}: {reason}")]
    UnknownLayout { path: PathBuf, reason: String },

    #[error("class `{label}` has {count} samples, at least 3 are required")]
    TooFewSamples { label: String, count: usize },

    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),

    #[error("{0} classes cannot be factored into two parts greater than one")]
    BadFactorization(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("cache was produced at model revision {cache}, model is at {model}")]
    StaleCache { cache: u64, model: u64 },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("class index {index} out of range for {classes} classes")]
    IndexOutOfRange { index: usize, classes: usize },

    #[error("truth has {truth} entries, predictions have {pred}")]
    LengthMismatch { truth: usize, pred: usize },

    #[error("no samples to evaluate")]
    EmptyEvaluation,

    #[error("label table mismatch: {0}")]
    LabelTableMismatch(String),

    #[error("invalid configuration `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("{modality} run failed: {source}")]
    Modality {
        modality: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::MalformedCsv {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub(crate) fn layout(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::UnknownLayout {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}
