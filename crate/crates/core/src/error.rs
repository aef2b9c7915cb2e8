use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    Domain(String),

    #[error(
        "matrix of size {dim}x{dim} is not positive definite (condition estimate {condition:.3e})"
    )]
    NotPositiveDefinite { dim: usize, condition: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("iteration {iteration}, step `{step}`: {source}")]
    Step {
        iteration: usize,
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than by the environment.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Domain(_)
            | Error::Invariant(_)
            | Error::Dimension(_)
            | Error::Empty(_)
            | Error::Degenerate(_)
            | Error::Format { .. } => true,
            Error::Step { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
