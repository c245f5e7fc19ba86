use thiserror::Error;

/// Errors raised by the estimation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid Laplacian: row {row} sums to {sum:e}")]
    InvalidLaplacian { row: usize, sum: f64 },

    #[error("invalid binary measurement {value}: expected -1 or +1")]
    InvalidMeasurement { value: i64 },

    /// A weight matrix failed its positive-definiteness check.
    #[error("weight {weight} is not positive definite")]
    NotPositiveDefinite { weight: &'static str },

    #[error("no admissible solution: {0}")]
    NoSolution(String),

    #[error("solver failed on window ending at t = {t}: {source}")]
    Solver {
        t: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
