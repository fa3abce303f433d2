use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("transition row (s={state}, a={action}) sums to {sum}, expected 1")]
    RowSum { state: usize, action: usize, sum: f64 },

    #[error("invalid probability {value} at (s={state}, a={action}, s'={next})")]
    Probability {
        state: usize,
        action: usize,
        next: usize,
        value: f64,
    },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("linear solve failed: residual {residual:e} exceeds tolerance")]
    Solve { residual: f64 },

    #[error("exact operator would produce {needed} atoms at state {state}, cap is {cap}; use the projected operator")]
    AtomBlowUp {
        state: usize,
        needed: usize,
        cap: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("result invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
