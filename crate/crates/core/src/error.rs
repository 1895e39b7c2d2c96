use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label {label} at index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("pixel {0} has a zero-norm feature vector")]
    SingularFeature(usize),
    #[error("row {0} of the reverse affinity is identically zero")]
    DegenerateRow(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("class {0} never occurs in the clean labels")]
    UndefinedRow(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("grid format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
