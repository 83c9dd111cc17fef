use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    /// The front-server birth-death chain has no stationary distribution
    /// (arrival rate into its queue is at least the service rate).
    #[error("front server is not ergodic: lambda*(1-p) = {rate} >= mu = {mu}")]
    NonErgodicFrontServer { rate: f64, mu: f64 },
    #[error("solver did not converge: residual {residual} > tol {tol}")]
    ConvergenceFailure { residual: f64, tol: f64 },
    /// Requested a rate from zero exposure time.
    #[error("undefined measurement: {0}")]
    UndefinedMeasurement(String),
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
