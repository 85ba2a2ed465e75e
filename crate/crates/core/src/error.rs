use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("numeric fault at step {step}: {what}")]
    NumericFault { step: u64, what: String },

    #[error("signal source exhausted at step {step}")]
    SourceExhausted { step: u64 },

    #[error("illegal feedback value {0} (allowed: +1.0, -0.5)")]
    IllegalFeedback(f64),

    #[error("empty trace")]
    EmptyTrace,

    #[error("every trial faulted ({0} trials)")]
    AllTrialsFaulted(usize),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(#[from] toml::de::Error),
}
