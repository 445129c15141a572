//! Error type shared across the library.

use thiserror::Error;

/// Errors produced by model construction, estimation and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Parameter outside its admissible domain (e.g. gamma shape <= 1).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Kernel has no interior peak, so peak latency is undefined.
    #[error("no interior peak: {0}")]
    NoInteriorPeak(String),

    /// A sampled curve does not have the shape an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// Inconsistent or inadmissible dimensions (includes identifiability
    /// violations of the stacked mixing model).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Not enough data to form the requested estimate.
    #[error("estimation error: {0}")]
    Estimation(String),

    /// A simulation scenario that cannot produce meaningful output.
    #[error("degenerate scenario: {0}")]
    Degenerate(String),

    /// Random parameter sampling failed to converge.
    #[error("sampling error: {0}")]
    Sampling(String),

    /// An optimization run produced non-finite values and was discarded.
    #[error("solver diverged: {0}")]
    Divergence(String),

    /// A whole multi-run stage failed (e.g. every start diverged).
    #[error("pipeline error: {0}")]
    Pipeline(String),

    /// Stability selection could not identify a usable cluster.
    #[error("stability error: {0}")]
    Stability(String),

    /// Matrix with no usable singular values.
    #[error("rank error: {0}")]
    Rank(String),

    /// No threshold exists (e.g. constant signal).
    #[error("threshold error: {0}")]
    Threshold(String),

    /// Fano factor undefined (non-positive mean peak amplitude).
    #[error("undefined Fano factor: {0}")]
    UndefinedFano(String),

    /// Malformed input file.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
