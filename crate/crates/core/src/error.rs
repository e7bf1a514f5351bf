use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("ensemble-space system has non-finite entries: {0}")]
    NonFiniteEnsembleSpace(String),

    #[error("innovation covariance is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("evidencing window [{start}, {end}] lies outside the recorded series of length {len}")]
    WindowOutOfRange { start: i64, end: i64, len: usize },

    #[error("empty series: {0}")]
    EmptySeries(&'static str),

    #[error(
        "filter divergence for model version F={forcing}: RMSE^t above {threshold} for {cycles} consecutive cycles (last at cycle {cycle})"
    )]
    FilterDivergence {
        forcing: f64,
        threshold: f64,
        cycles: usize,
        cycle: usize,
    },

    #[error("archive format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
