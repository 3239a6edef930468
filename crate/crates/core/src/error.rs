use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empirical dataset has no density at t = 0; exact score needs t > 0")]
    DegenerateDensity,

    #[error("bisection did not converge: {0}")]
    NonConvergent(String),

    #[error("particle coordinate exceeded {cap:e} in magnitude at step {step}")]
    Diverged { step: usize, cap: f64 },

    #[error("ensemble sizes differ: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("problem size {size} exceeds the limit {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("matrix is not symmetric positive semi-definite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("grid too coarse: {points} points in [{from}, {to}], need at least {required}")]
    GridTooCoarse {
        points: usize,
        from: f64,
        to: f64,
        required: usize,
    },

    #[error("t = {t} is not above t0 = {t0}; the LSI lower bound does not apply")]
    BelowT0 { t: f64, t0: f64 },

    #[error("beta = {beta} outside (0, {max}]")]
    BetaOutOfRange { beta: f64, max: f64 },

    #[error("unknown name '{0}'")]
    UnknownName(String),

    #[error("results are missing: {0}")]
    MissingResults(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
