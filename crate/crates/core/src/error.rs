use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("Gram matrix could not be factorised after jitter escalation (condition number ~ {condition_number:e})")]
    Conditioning { condition_number: f64 },
    #[error("unstable process: branching ratio {0} >= 1")]
    Instability(f64),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("rate {rate} exceeds thinning bound {bound} at {point:?}")]
    BoundViolation { rate: f64, bound: f64, point: [f64; 3] },
    #[error("cluster simulation exceeded {0} generations")]
    ExplosionGuard(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("all {n} restarts failed: {messages:?}")]
    AllRestartsFailed { n: usize, messages: Vec<String> },
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
