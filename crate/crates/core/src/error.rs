use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        row: usize,
        column: String,
        message: String,
    },

    #[error("entry {entry}: no observed data")]
    EmptyEntry { entry: String },

    #[error("degenerate local design at t = {at} after widening bandwidth to {bandwidth}")]
    DegenerateWindow { at: String, bandwidth: f64 },

    #[error("insufficient raw pairs for covariance ({pair}): {count} < {required}")]
    InsufficientData {
        pair: String,
        count: usize,
        required: usize,
    },

    #[error("rank-deficient system in {context} (component {component:?})")]
    RankDeficient {
        context: String,
        component: Option<usize>,
    },

    #[error("component {component} collapsed to zero during normalization")]
    DegenerateComponent { component: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sample {sample}: {message}")]
    Sample { sample: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures that come from the numerics rather than from bad
    /// input or configuration.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::DegenerateWindow { .. }
                | Error::InsufficientData { .. }
                | Error::RankDeficient { .. }
                | Error::DegenerateComponent { .. }
                | Error::NonFinite(_)
        )
    }
}
