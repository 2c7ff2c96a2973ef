use thiserror::Error;

#[derive(Debug, Error)]
pub enum EptError {
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl EptError {
    /// Short tag used by the CLI when reporting failures.
    pub fn kind(&self) -> &'static str {
        match self {
            EptError::Format(_) => "format",
            EptError::Validation(_) => "validation",
            EptError::Protocol(_) => "protocol",
            EptError::State(_) => "state",
            EptError::Numeric(_) => "numeric",
            EptError::Config(_) => "config",
            EptError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, EptError>;

pub(crate) fn validation<T>(msg: impl Into<String>) -> Result<T> {
    Err(EptError::Validation(msg.into()))
}
