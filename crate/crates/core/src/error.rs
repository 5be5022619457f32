use thiserror::Error;

/// Errors raised across the solver, oracle and geometry layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("point is outside the simplex chart: {0}")]
    OutOfChart(String),

    #[error("invalid simplex point: {0}")]
    InvalidPoint(String),

    #[error("state index {index} out of range for dimension {dim}")]
    IndexOutOfRange { index: usize, dim: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("time step {dt} violates the stability bound {bound} (mesh {mesh})")]
    Cfl { dt: f64, bound: f64, mesh: f64 },

    #[error("forward integration failed: {0}")]
    Integration(String),
}

pub type Result<T> = std::result::Result<T, Error>;
