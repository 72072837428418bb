//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the game, chain, and solver operations.
#[derive(Debug, Error)]
pub enum Error {
    /// A profile or boundary does not match the game or chain shape.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Taboo and target sets overlap.
    #[error("taboo and target sets overlap at state {0}")]
    OverlappingSets(usize),

    /// An operation requiring an absorbing chain was given a chain with
    /// a trapped recurrent class.
    #[error("chain is not absorbing; trapped recurrent class {0:?}")]
    NotAbsorbing(Vec<usize>),

    /// A part or removal description is inconsistent with its host row.
    #[error("invalid part at state {state}: {reason}")]
    InvalidPart { state: usize, reason: String },

    /// Removing the full mass of a row.
    #[error("removal would empty the row at state {0}")]
    RemovesEverything(usize),

    /// A matrix game with no entries.
    #[error("empty payoff matrix")]
    EmptyMatrix,

    /// An auxiliary absorption rate is zero where a positive one is
    /// required.
    #[error("auxiliary absorption rate is zero at state {0}")]
    ZeroAuxRate(usize),

    /// A stated hypothesis of a checked bound does not hold.
    #[error("hypothesis violation: {0}")]
    Hypothesis(String),

    /// An exact procedure was asked for on an instance past desk scale.
    #[error("instance too large: {0}")]
    TooLarge(String),

    /// A parameter is outside its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Game file or profile file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Game validation failed.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A solver did not converge within its iteration budget.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
