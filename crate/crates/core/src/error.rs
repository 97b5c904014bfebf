use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A source position coincides with an array position (zero distance),
    /// or another geometric quantity the model divides by vanished.
    #[error("degenerate geometry{}: {detail}", step_suffix(*.step))]
    DegenerateGeometry {
        /// 1-based time step at which the degeneracy occurred, when known.
        step: Option<usize>,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parse error in {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("i/o error on {path}: {detail}")]
    Io { path: String, detail: String },
}

fn step_suffix(step: Option<usize>) -> String {
    match step {
        Some(k) => format!(" at step {k}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn degenerate(detail: impl Into<String>) -> Self {
        Error::DegenerateGeometry {
            step: None,
            detail: detail.into(),
        }
    }

    /// Attach a step index to a geometry error that does not carry one yet.
    pub(crate) fn at_step(self, k: usize) -> Self {
        match self {
            Error::DegenerateGeometry { step: None, detail } => Error::DegenerateGeometry {
                step: Some(k),
                detail,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
