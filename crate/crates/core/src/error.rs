use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum SpenError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config line {line}, key `{key}`: {msg}")]
    ConfigParse {
        line: usize,
        key: String,
        msg: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numeric guard: {0}")]
    NumericGuard(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("internal consistency error: {0}")]
    Consistency(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SpenError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        SpenError::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// True for errors caused by invalid user input (configuration or
    /// validation) rather than by a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, SpenError::Config(_) | SpenError::ConfigParse { .. })
    }
}

pub type Result<T> = std::result::Result<T, SpenError>;
