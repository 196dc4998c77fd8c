//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("linear solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    #[error("matrix is not positive definite (encountered p'Ap = {0:.3e})")]
    IndefiniteMatrix(f64),

    #[error("non-finite forcing on triangle {triangle}")]
    NonFiniteForcing { triangle: usize },

    #[error("singular relaxation: gamma = {gamma} with rho = 0 at a zero of m")]
    SingularRelaxation { gamma: f64 },

    #[error("time step fell below the floor {floor:.3e} at t = {t:.6e}")]
    TimeStepUnderflow { floor: f64, t: f64 },

    #[error("discrete energy increased by {increase:.3e} at step {step} (t = {t:.6e})")]
    EnergyIncrease { step: usize, t: f64, increase: f64 },

    #[error("line search failed: {0}")]
    LineSearch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            message: message.into(),
        }
    }
}
