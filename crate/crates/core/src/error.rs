use thiserror::Error;

/// Errors produced while reading data, evaluating likelihoods or fitting models.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: column `{0}` not found")]
    MissingColumn(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("rectangle probability of dimension {0} is not supported (max 10)")]
    UnsupportedDimension(usize),

    #[error("quadrature order {0} out of range 1..=64")]
    OrderOutOfRange(usize),

    #[error("mode search did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    ModeSearch {
        iterations: usize,
        gradient_norm: f64,
        last: Vec<f64>,
    },

    #[error("non-finite integrand at quadrature node {node:?}")]
    Integration { node: Vec<f64> },

    #[error("subject `{subject}`: {source}")]
    Subject {
        subject: String,
        #[source]
        source: Box<Error>,
    },

    #[error("objective not finite when probing coordinate {0}")]
    Gradient(usize),

    #[error("objective not finite at the starting point")]
    NonFiniteStart,

    #[error("optimizer stalled at f = {f} after {iterations} iterations")]
    Stall {
        x: Vec<f64>,
        f: f64,
        iterations: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn for_subject(self, subject: &str) -> Error {
        Error::Subject {
            subject: subject.to_string(),
            source: Box::new(self),
        }
    }
}
