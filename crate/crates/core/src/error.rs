use thiserror::Error;

/// Errors raised anywhere in the KArAt stack.
#[derive(Debug, Error)]
pub enum KaratError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KaratError>;

impl KaratError {
    pub fn dim(msg: impl Into<String>) -> Self {
        KaratError::Dimension(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        KaratError::Numeric(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        KaratError::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        KaratError::Format { offset, message: msg.into() }
    }

    /// True for errors caused by bad user configuration rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, KaratError::Config(_))
    }
}
