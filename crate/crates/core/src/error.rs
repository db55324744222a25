use thiserror::Error;

/// Errors raised by the lab's constructors and operations.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("structural error: {0}")]
    Structure(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("process is not adapted: step {step}, atom {atom}, deviation {deviation:e}")]
    NotAdapted {
        step: usize,
        atom: usize,
        deviation: f64,
    },

    #[error("positivity violated at step {step}, atom {atom}, grid index {index}: value {value:e}")]
    Positivity {
        step: usize,
        atom: usize,
        index: usize,
        value: f64,
    },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid tau grid: {0}")]
    InvalidGrid(String),

    #[error("density process is not a martingale: {0}")]
    NotMartingale(String),

    #[error("quadrature tail mass {0:e} exceeds 1e-10")]
    TailMass(f64),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("degenerate construction after {0} retries")]
    Degenerate(usize),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
