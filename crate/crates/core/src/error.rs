use thiserror::Error;

/// Errors raised by the editing framework.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid value for {field}: {reason}")]
    InvalidValue { field: String, reason: String },

    #[error("unknown transform kind `{0}`")]
    UnknownKind(String),

    #[error("direction {index} has zero norm and cannot be normalized")]
    DegenerateDirection { index: usize },

    #[error("oracle target {target} for attribute {index} lies outside (0, 1)")]
    OracleTargetOutOfRange { index: usize, target: f64 },

    #[error("training diverged at iteration {iteration}: non-finite loss")]
    Divergence { iteration: u64 },

    #[error("all {restarts} inversion restarts produced non-finite losses")]
    InversionFailed { restarts: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("image codec error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
