use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular matrix: pivot {pivot:.3e} below threshold at column {column}")]
    SingularMatrix { column: usize, pivot: f64 },
    #[error("matrix is rank deficient; M M^T could not be factored")]
    RankDeficient,
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("no nonsingular set of {n_eq} completion columns found")]
    PartitionNotFound { n_eq: usize },
    #[error("Newton completion did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonDiverged { iterations: usize, residual: f64 },
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("reference solver failed: {0}")]
    OracleFailed(String),
    #[error("cannot aggregate reports of different methods ({0} vs {1})")]
    MixedMethods(String, String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

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
