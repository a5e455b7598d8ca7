//! Error type shared by every module of the simulator.

use thiserror::Error;

use crate::optimizer::ConvergenceTrace;

/// Anything that can go wrong while configuring or running a simulation.
#[derive(Debug, Error)]
pub enum SimError {
    /// A config document line that could not be parsed as `key = value`.
    #[error("config line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    /// A config key that is not part of the documented key set.
    #[error("config line {line}: unknown key `{key}`")]
    UnknownConfigKey { key: String, line: usize },

    /// A structurally valid config whose values violate an invariant.
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },

    /// A function argument outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A matrix factorization failed because the operand is singular.
    #[error("rank-deficient matrix: {0}")]
    RankDeficient(String),

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Power control hit a non-finite objective; the partial trace is kept
    /// so the caller can inspect how far the search got.
    #[error("optimization aborted: {reason} ({} trace steps recorded)", trace.steps.len())]
    OptimizationAborted {
        reason: String,
        trace: Box<ConvergenceTrace>,
    },

    /// Filesystem failure while writing campaign artifacts.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SimError>;
