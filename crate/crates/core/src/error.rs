use std::fmt;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at epoch {epoch}: mean loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("format error in {source_name} at offset {offset}: {message}")]
    Format {
        source_name: String,
        offset: u64,
        message: String,
    },

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u8,
        expected: u8,
    },

    #[error("fit error: {0}")]
    Fit(String),

    #[error("matrix not positive definite: pivot {index} is {value:e}")]
    NotPositiveDefinite { index: usize, value: f64 },

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl fmt::Display) -> Self {
        Error::InvalidArgument(msg.to_string())
    }

    pub(crate) fn format(source_name: impl Into<String>, offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            source_name: source_name.into(),
            offset,
            message: message.into(),
        }
    }

    /// Short machine-readable kind tag, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Diverged { .. } => "diverged",
            Error::Format { .. } => "format",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::Fit(_) => "fit",
            Error::NotPositiveDefinite { .. } => "numerical",
            Error::UndefinedCorrelation(_) => "undefined_correlation",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
