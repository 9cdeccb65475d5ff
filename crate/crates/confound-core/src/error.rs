use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter {name} = {value}: {why}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        why: &'static str,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown preset '{0}'")]
    UnknownPreset(String),
    #[error("joint covariance not positive definite (jitter ladder exhausted)")]
    NotPositiveDefinite,
    #[error("zero denominator in ratio estimator")]
    ZeroDenominator,
    #[error("not enough data: {0}")]
    InsufficientData(String),
    #[error("smoothness exponent estimate inconclusive: {0}")]
    Inconclusive(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to: 2 for configuration
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParam { .. }
            | Error::Config(_)
            | Error::UnknownPreset(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 2,
            Error::NotPositiveDefinite
            | Error::ZeroDenominator
            | Error::InsufficientData(_)
            | Error::Inconclusive(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}
