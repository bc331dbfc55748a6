use thiserror::Error;

/// Errors raised by the numerical kernels.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum GkaError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate reversal at iteration {iteration}: |b_i| = {divisor:e}")]
    DegenerateReversal { iteration: usize, divisor: f64 },

    #[error("solver failed at (batch {batch}, head {head}, t {time}): {source}")]
    AtPosition {
        batch: usize,
        head: usize,
        time: usize,
        #[source]
        source: Box<GkaError>,
    },

    #[error("missing cached forward quantity: {0}")]
    MissingCache(&'static str),
}

impl GkaError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        GkaError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn at(self, batch: usize, head: usize, time: usize) -> Self {
        GkaError::AtPosition {
            batch,
            head,
            time,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, GkaError>;
