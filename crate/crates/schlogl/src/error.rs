use thiserror::Error;

/// Errors produced by the discretization, actuator and solver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("grid too coarse: {0}")]
    Resolution(String),

    #[error("degenerate actuator family: {0}")]
    DegenerateFamily(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("solution blew up at t = {time:.6} (‖y‖_H = {norm:.3e})")]
    BlowUp { time: f64, norm: f64 },

    #[error("dimension mismatch: {0}")]
    Mismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
