use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{op}: non-finite input value at index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("backward: {0}")]
    Backward(String),

    #[error("model stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown variant `{name}` (valid: {valid})")]
    UnknownVariant { name: String, valid: String },

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("idx {path}: {detail} (byte offset {offset})")]
    Idx {
        path: String,
        offset: usize,
        detail: String,
    },

    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("bad checkpoint magic")]
    BadMagic,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u8, expected: u8 },

    #[error("corrupt checkpoint: {detail} (byte offset {offset})")]
    Checkpoint { offset: usize, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when a non-finite value caused this error, at any stage depth.
    pub fn is_non_finite(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Stage { source, .. } => source.is_non_finite(),
            _ => false,
        }
    }

    /// Tags an error with the pipeline stage that produced it.
    pub(crate) fn at(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }
}
