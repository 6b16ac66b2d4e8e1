use thiserror::Error;

use crate::qvi::QviSolution;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input data")]
    EmptyData,
    #[error("timestamps are not non-decreasing (row {row})")]
    UnsortedInput { row: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("estimation window too short: {len} prices, need at least 3")]
    WindowTooShort { len: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate diffusion: sigma must be positive")]
    DegenerateDiffusion,
    #[error("inconsistent deposit: liquidity from dx ({from_x}) and dy ({from_y}) disagree")]
    InconsistentDeposit { from_x: f64, from_y: f64 },
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    BufferTooSmall { have: usize, need: usize },
    #[error("QVI solver did not converge after {} iterations", .0.iterations)]
    NoConvergence(Box<QviSolution>),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input (config, files, arguments)
    /// rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidFractions(_)
                | Error::UnsortedInput { .. }
                | Error::Json(_)
                | Error::Csv(_)
        )
    }
}
