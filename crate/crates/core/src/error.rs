use thiserror::Error;

use crate::scalar::AnyMatrix;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid tangent vector: {0}")]
    InvalidTangent(String),

    #[error("cut locus: largest principal angle {angle} is within {tol} of pi/2")]
    CutLocus { angle: f64, tol: f64 },

    /// `index` names the offending data point when the failure happened inside a batch.
    #[error("degenerate projection{}: adjoint(A)*X is rank deficient", index.map(|i| format!(" at data index {i}")).unwrap_or_default())]
    DegenerateProjection { index: Option<usize> },

    #[error("zero variance: {0}")]
    ZeroVariance(String),

    #[error("supervision is degenerate: {0}")]
    DegenerateSupervision(String),

    /// Carries the best iterate seen before giving up (one matrix per factor).
    #[error("{context} did not converge after {iterations} iterations (residual {residual:e})")]
    Convergence {
        context: String,
        iterations: usize,
        residual: f64,
        best: Vec<AnyMatrix>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Attach a data index to errors raised while processing one element of a batch.
    pub fn at_index(self, index: usize) -> Self {
        match self {
            Error::DegenerateProjection { index: None } => {
                Error::DegenerateProjection { index: Some(index) }
            }
            Error::CutLocus { angle, tol } => Error::Degenerate(format!(
                "data index {index}: cut locus (angle {angle} within {tol} of pi/2)"
            )),
            Error::Degenerate(msg) => Error::Degenerate(format!("data index {index}: {msg}")),
            other => other,
        }
    }
}
