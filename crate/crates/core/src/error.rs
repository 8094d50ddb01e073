use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "quadrature did not converge: estimate {estimate:.6e}, error estimate {error:.3e} \
         (tolerance {tolerance:.3e}) after {panels} panels"
    )]
    Convergence {
        estimate: f64,
        error: f64,
        tolerance: f64,
        panels: usize,
    },

    #[error("sample second-moment matrix is singular (n = {n}, d = {d})")]
    SingularCovariance { n: usize, d: usize },

    #[error("{aborted} of {total} trials aborted, more than the 5% allowance")]
    TooManyAborts { aborted: usize, total: usize },

    #[error("beta did not settle within {steps} steps (last change {last_change:.3e})")]
    NoBetaConvergence { steps: usize, last_change: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Process exit code: 1 for validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Domain(_) | Error::Config(_) | Error::Json(_) | Error::Io(_) => 1,
            Error::Convergence { .. }
            | Error::SingularCovariance { .. }
            | Error::TooManyAborts { .. }
            | Error::NoBetaConvergence { .. } => 2,
        }
    }
}
