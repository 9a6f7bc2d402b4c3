use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate rotation")]
    DegenerateRotation,

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid skeleton: {0}")]
    Skeleton(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} needs at least {needed} frames, got {got}")]
    TooShort {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backpropagation root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("timestamps must be strictly increasing ({prev} then {next})")]
    NonIncreasingTimestamp { prev: f64, next: f64 },

    #[error("training diverged at stage {stage}, epoch {epoch}: {detail}")]
    Diverged {
        stage: u8,
        epoch: usize,
        detail: String,
    },

    #[error("{0}")]
    Missing(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
