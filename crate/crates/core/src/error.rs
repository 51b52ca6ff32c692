use thiserror::Error;

/// Errors produced by the thinning library.
#[derive(Debug, Error)]
pub enum ThinError {
    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("cannot orthonormalize a rank-deficient basis (smallest Gram eigenvalue {0:e})")]
    SingularOrthonormalization(f64),

    #[error("ill-posed masked update: {observed} observed coordinates for rank {rank}")]
    IllPosedUpdate { observed: usize, rank: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("insufficient training data: got {got}, need at least {need}")]
    InsufficientTraining { got: usize, need: usize },

    #[error("single-class labels: both anomalies and inliers are required")]
    SingleClass,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("batch {batch}: {source}")]
    Batch {
        batch: usize,
        #[source]
        source: Box<ThinError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ThinError>;

pub(crate) fn check_dim(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(ThinError::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}
