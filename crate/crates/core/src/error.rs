use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{matrix}[{row},{col}] evaluated to {value} at t = {time}")]
    NonFiniteEntry {
        matrix: String,
        row: usize,
        col: usize,
        time: f64,
        value: f64,
    },

    #[error("{what} diverged at t = {time}")]
    Divergence { what: &'static str, time: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid D-structure: {0}")]
    Structure(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("improper filter: numerator power {numerator} exceeds denominator power {denominator}")]
    ImproperFilter { numerator: usize, denominator: usize },

    #[error("divisor |{signal}| fell below guard at t = {time}")]
    Singularity { signal: &'static str, time: f64 },
}
