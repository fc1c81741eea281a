use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, widths or hyperparameters that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// A loss or parameter became NaN/Inf during optimization.
    #[error("training error: {0}")]
    Training(String),

    /// An API was called in a state where it is not allowed (e.g. stepping a finished episode).
    #[error("usage error: {0}")]
    Usage(String),

    /// A checkpoint or run artifact could not be read back.
    #[error("load error: {0}")]
    Load(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn training(msg: impl Into<String>) -> Self {
        Error::Training(msg.into())
    }
}
