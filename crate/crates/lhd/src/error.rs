//! Crate-wide error type.

use thiserror::Error;

/// Everything that can go wrong while building, relaxing, discretizing,
/// counting, pricing, or searching a space.
#[derive(Debug, Error)]
pub enum LhdError {
    /// A space declaration violates a structural bound.
    #[error("invalid space: {0}")]
    InvalidSpace(String),

    /// Architecture parameters do not match the space they claim to cover.
    #[error("invalid architecture parameters: {0}")]
    InvalidArchParams(String),

    /// A genotype is malformed or inconsistent with its space.
    #[error("invalid genotype: {0}")]
    InvalidGenotype(String),

    /// A policy cannot be applied to the given space.
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    /// A counting formula was asked for an empty or impossible selection.
    #[error("invalid count: {0}")]
    InvalidCount(String),

    /// Capacity accounting was given an inconsistent plan or budget.
    #[error("invalid capacity request: {0}")]
    InvalidCapacity(String),

    /// A metric is undefined on the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A search run hit a configuration or sampling failure.
    #[error("search failure: {0}")]
    SearchFailure(String),

    /// Input data (CSV or JSON) failed to parse or validate.
    #[error("malformed input: {0}")]
    MalformedInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
