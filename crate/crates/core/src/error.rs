use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EfcError {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("file {0} contains no data rows")]
    EmptyFile(PathBuf),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("projection onto the confounder level set is singular (condition number {condition:e})")]
    SingularProjection { condition: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("fold {fold} has fewer than one row")]
    FoldTooSmall { fold: usize },

    #[error("design matrix is rank deficient: {0}")]
    DegenerateDesign(String),

    #[error("every surrogate search diverged ({0} attempts)")]
    AllDiverged(usize),

    #[error("trajectory leaves the bound domain: |t| = {norm} > R = {radius}")]
    DomainExceeded { norm: f64, radius: f64 },

    #[error("singular value decomposition failed: {0}")]
    SvdFailure(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = EfcError> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(EfcError::DimensionMismatch { expected, found })
    }
}
