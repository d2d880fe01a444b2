use numkit::NumError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category, used in CLI error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Num(NumError::Dimension(_)) | Error::Shape(_) => "shape",
            Error::Num(NumError::Config(_)) | Error::Config(_) => "config",
            Error::Num(NumError::Format(_)) | Error::Format(_) => "format",
            Error::Num(NumError::NonFinite(_)) | Error::Numeric(_) => "numeric",
            Error::Num(NumError::Tape(_)) => "tape",
            Error::Num(NumError::Io(_)) | Error::Io(_) => "io",
            Error::Data(_) => "data",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::Generation(_) => "generation",
            Error::Json(_) => "json",
        }
    }
}
