//! Crate-wide error type.
//!
//! One enum covers every failure class the solver can hit so that callers
//! (in particular the CLI) can map each class to a distinct exit path.

use thiserror::Error;

/// Errors produced by market construction, payoff handling, training and the
/// LP oracle.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// Invalid user input: market parameters, config values, shape mismatches.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Payoff text failed to parse; `offset` is a byte offset into the input.
    #[error("payoff parse error at offset {offset}: {msg}")]
    PayoffParse { offset: usize, msg: String },

    /// Payoff parsed but references an asset outside the binding dimension.
    #[error("payoff binding error: {0}")]
    PayoffBinding(String),

    /// Payoff evaluation failed on a concrete sample row.
    #[error("payoff evaluation error at row {row}: {msg}")]
    PayoffEval { row: usize, msg: String },

    /// Training loop hit a non-finite objective and stopped.
    #[error("training aborted at iteration {iteration}: {msg}")]
    TrainingAbort { iteration: usize, msg: String },

    /// Requested discretization exceeds the configured size cap.
    #[error("size cap exceeded: {0}")]
    SizeCap(String),

    /// The LP constraint set admits no coupling (price system is inconsistent).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Numerical breakdown inside a solver (factorization, simplex stall).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Filesystem failure while writing experiment outputs.
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
