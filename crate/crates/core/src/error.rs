//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors reported by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// A configuration value violates its constraints.
    #[error("configuration error: {0}")]
    Config(String),
    /// Input data could not be parsed.
    #[error("parse error at line {line}: {msg}")]
    Parse {
        /// One-based line number (0 when unknown).
        line: usize,
        /// Description of the problem.
        msg: String,
    },
    /// Exact constraints cannot be satisfied simultaneously.
    #[error("infeasible: {0}")]
    Infeasible(String),
    /// A linear system that must be invertible is singular.
    #[error("degenerate: {0}")]
    Degenerate(String),
    /// An iterative solver stopped before reaching its tolerance.
    #[error("tolerance not reached: {0}")]
    Tolerance(String),
    /// The dyadic decomposition exceeded the depth limit.
    #[error("decomposition did not terminate: {0}")]
    NonTermination(String),
    /// Reading input failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Shorthand result type.
pub type Result<T> = std::result::Result<T, Error>;
