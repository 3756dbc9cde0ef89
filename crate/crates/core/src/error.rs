use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unsupported smoothness {0}; supported half-integer values are 0.5, 1.5, 2.5, 3.5, 4.5")]
    UnsupportedSmoothness(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A conditioning block stayed non positive definite even after one jitter retry.
    #[error("covariance block at ordered position {position} is singular (jitter retry failed)")]
    SingularBlock { position: usize },

    #[error("feature matrix is rank deficient; cannot profile trend coefficients")]
    RankDeficientBasis,

    #[error("dense operation on n = {n} exceeds the cap of {cap}")]
    DenseCapExceeded { n: usize, cap: usize },

    #[error("objective is not finite at the initial parameters")]
    NonFiniteObjective,

    #[error("unknown benchmark protocol '{0}'; known protocols: matern_sim, borehole_curves, testfun_suite, noise_recovery, piston_uq")]
    UnknownProtocol(String),

    #[error("evaluator failed at design point {index}: {message}")]
    EvaluatorFailure { index: usize, message: String },

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
