use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    /// Timestamp at `index` (0-based sample) is smaller than its predecessor.
    #[error("non-monotonic timestamp at sample {index}")]
    NonMonotonicTimestamp { index: usize },

    #[error("zero duration")]
    ZeroDuration,

    #[error("signature too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
