//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the simulation and inference engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A location fell outside the interior domain bounds.
    #[error("location {index} at ({x}, {y}) is outside the domain")]
    OutOfDomain { index: usize, x: f64, y: f64 },

    /// A sparse factorization failed or a matrix was numerically indefinite.
    #[error("numerical conditioning failure: {0}")]
    Conditioning(String),

    /// The inner (latent) optimization failed to make progress.
    #[error("inner optimization failure: {0}")]
    InnerFailure(String),

    /// An identifier (vessel, covariate, time label) was not registered.
    #[error("lookup failure: {0}")]
    Lookup(String),

    /// A data file did not match its declared schema.
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    /// A record violated a model invariant (with row context).
    #[error("invariant violation at row {row}: {message}")]
    InvariantViolation { row: usize, message: String },

    /// Required covariate history is missing.
    #[error("missing data: {0}")]
    MissingData(String),

    /// Too few successful replicates to summarize.
    #[error("summary failure: {0}")]
    Summary(String),

    /// A likelihood component failed; the tag names the component.
    #[error("likelihood component `{component}`: {source}")]
    Component {
        component: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attach a likelihood-component tag to an error.
    pub fn in_component(self, component: &'static str) -> Self {
        Error::Component {
            component,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
