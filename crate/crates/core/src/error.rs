use std::path::PathBuf;

/// Errors produced anywhere in the defense pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("patch values outside [0, 1]")]
    OutOfRange,

    #[error("loss has no usable anchors: {0}")]
    EmptyAnchors(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty sequence")]
    EmptySequence,

    #[error("missing defense network for the {0} branch")]
    MissingNet(&'static str),

    #[error("no valid training pairs after {0} attempts")]
    NoValidPairs(usize),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    CheckpointKind { expected: String, found: String },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("annotation count ({annotations}) does not match frame count ({frames})")]
    CountMismatch { frames: usize, annotations: usize },

    #[error("{path}:{line}: cannot parse annotation {text:?}")]
    Annotation { path: PathBuf, line: usize, text: String },

    #[error("metric mismatch: {0}")]
    MetricMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Errors caused by the request itself (bad config, missing or mismatched
    /// inputs) rather than by a failure while running.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingNet(_)
                | Error::Version { .. }
                | Error::CheckpointKind { .. }
                | Error::MetricMismatch(_)
                | Error::CountMismatch { .. }
                | Error::Annotation { .. }
        )
    }
}
