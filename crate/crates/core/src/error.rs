use thiserror::Error;

/// Every failure surfaced by the library.
#[derive(Debug, Error)]
pub enum LabError {
    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration that violates a model constraint.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    /// A caller broke a documented precondition (mismatched grids, wrong run kind).
    #[error("contract error: {0}")]
    Contract(String),
    #[error("simulation diverged at step {step}: {detail}")]
    Diverged { step: i64, detail: String },
    /// The input is valid but the requested statistic cannot be computed reliably.
    #[error("refused: {0}")]
    Refused(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl From<serde_json::Error> for LabError {
    fn from(e: serde_json::Error) -> Self {
        LabError::Format(e.to_string())
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Format(e.to_string())
    }
}
