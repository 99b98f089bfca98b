use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A forward operation produced a non-finite value.
    #[error("non-finite result from `{op}` at graph node {node}")]
    Numerical { op: &'static str, node: usize },

    /// Non-finite gradients or parameters handed to the optimiser.
    #[error("non-finite {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    /// Operands from two different graphs were combined.
    #[error("operands belong to different graphs")]
    GraphMismatch,

    /// `backward` was called twice without clearing gradients.
    #[error("gradients already populated; call zero_grad before a second backward pass")]
    StaleGradient,

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{0} is outside the domain of psi (x must be >= 0)")]
    Domain(f64),

    /// The ODE solution became non-finite.
    #[error("solver diverged at grid index {index} (t = {time})")]
    Divergence { index: usize, time: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("io error on {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
