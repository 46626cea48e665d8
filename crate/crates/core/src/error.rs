use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor was recorded on tape {found}, but the active tape is {expected}")]
    ForeignTensor { expected: u64, found: u64 },

    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error("time {0} lies outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("singular scheduler at t={t}: denominator {denominator:e} below 1e-12")]
    SingularScheduler { t: f64, denominator: f64 },

    #[error("unknown condition label {label} (model has {count} conditions)")]
    UnknownCondition { label: usize, count: usize },

    #[error("non-finite value encountered: {context}")]
    NonFinite { context: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
