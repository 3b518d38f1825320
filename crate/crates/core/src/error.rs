use thiserror::Error;

pub type Result<T, E = EmffError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmffError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("satellites {i} and {j} are coincident (distance {distance:e} m)")]
    Coincident { i: usize, j: usize, distance: f64 },

    #[error("safety filter regularity violated: |L_G h|^2 + h^2/gamma = {denominator:e}")]
    Regularity { denominator: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("safe set exit at t = {time:.4} s: {detail}")]
    SafeSetExit { time: f64, detail: String },

    #[error("internal error: {0}")]
    Internal(String),
}
