use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error on axis {axis}: {msg}")]
    Dimension { axis: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("geometry error on axis {axis}: {msg}")]
    Geometry { axis: &'static str, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unsupported variant: {0}")]
    UnsupportedVariant(String),

    #[error("batchnorm running statistics are uninitialized")]
    UninitializedStats,

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("gradient tape error: {0}")]
    Tape(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("sampling rate error: {0}")]
    SamplingRate(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(axis: usize, msg: impl Into<String>) -> Self {
        Error::Dimension {
            axis,
            msg: msg.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
