//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument values (non-finite inputs, out-of-range parameters).
    #[error("domain error: {0}")]
    Domain(String),

    /// Vector or matrix shapes do not conform.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The model does not support the requested operation (for example a
    /// transition density for deterministic dynamics).
    #[error("capability error: {0}")]
    Capability(String),

    /// All particle weights vanished; the filter lost track of the state.
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    /// A linear-algebra step failed (singular or non-PSD matrix).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// An ensemble member left the admissible region.
    #[error("divergence at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    /// A per-step algorithm error, with the failing step index attached.
    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps an error with the time step or iteration index it occurred at.
    pub fn at_step(self, step: usize) -> Error {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}
