use tvstyle_core::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("tokenization error: {0}")]
    Tokenize(String),
    #[error("training failure: {0}")]
    Training(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Png(#[from] png::EncodingError),
}

impl Error {
    /// Errors that stem from an invalid configuration rather than a runtime
    /// failure; the CLI maps these to exit code 2.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Core(CoreError::Config(_)))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
