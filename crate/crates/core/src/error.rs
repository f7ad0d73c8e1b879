use thiserror::Error;

/// Errors raised by the toolkit.
///
/// `InvalidInput` and `Diophantine` are validation failures (bad data or a
/// map that violates the irrationality condition); `Internal` signals a
/// broken invariant inside a solver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("diophantine condition violated at {} frequencies (first: {:?}); {context}", .violations.len(), .violations.first())]
    Diophantine {
        violations: Vec<Vec<i64>>,
        context: String,
    },

    #[error("cut-and-project map has not been validated: {0}")]
    UnvalidatedMap(String),

    #[error("unsupported demo: {0}")]
    UnsupportedDemo(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
