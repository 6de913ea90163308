use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum OvtError {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("cannot normalize a vector with norm {norm:e}")]
    Normalization { norm: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(
        "could not place {categories} category prototypes with pairwise angle >= {min_angle_deg} degrees; \
         use fewer categories, a larger input_dim, or a lower minimum angle"
    )]
    Separation { categories: usize, min_angle_deg: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OvtError>;

impl OvtError {
    pub(crate) fn dims(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        OvtError::Dimension {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
