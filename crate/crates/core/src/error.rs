//! Error type shared across the engine.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CoreError {
    /// Two tensor shapes that an operation requires to agree do not.
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single-tensor shape requirement is violated.
    #[error("{op}: bad shape {shape:?}: {msg}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// An operation precondition beyond shapes is violated.
    #[error("{0}")]
    Contract(String),

    /// A non-finite value appeared. The step is aborted, never propagated.
    #[error("non-finite value produced by `{op}` during {phase}")]
    NonFinite { op: &'static str, phase: &'static str },

    /// Gradient-check oracle detected a non-deterministic objective.
    #[error("gradient-check oracle error: {0}")]
    Oracle(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input data, with file position when known.
    #[error("{path}:{line}: {msg}")]
    DataFormat {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{msg}: {source}")]
    Io {
        msg: String,
        #[source]
        source: std::io::Error,
    },
}

impl CoreError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    pub fn io(msg: impl Into<String>, source: std::io::Error) -> Self {
        CoreError::Io { msg: msg.into(), source }
    }
}
