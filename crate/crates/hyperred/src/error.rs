//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller handed in data that violates a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A bar with (numerically) zero rest length cannot carry a Green strain.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// The full-order Newton continuation failed to converge. `step` is the
    /// load-step index within the case (step 0 is the rest state).
    #[error("Newton diverged at load step {step}: residual {residual:.3e} after {iterations} iterations")]
    Divergence {
        step: usize,
        residual: f64,
        iterations: usize,
    },

    /// An archive file is corrupt, truncated, or has an unsupported version.
    #[error("archive format error in {path}: {detail}")]
    Format { path: String, detail: String },

    /// A computation produced a non-finite intermediate value.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// A pipeline stage was invoked before the stage that produces its input.
    #[error("missing artifact {path}; run `{command}` first")]
    MissingArtifact { path: String, command: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand for [`Error::InvalidInput`] with formatted detail.
    pub fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
