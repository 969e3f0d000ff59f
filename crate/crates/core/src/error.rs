use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("non-finite state at node {node}")]
    NonFiniteState { node: usize },
    #[error("non-finite costate at node {node}")]
    NonFiniteCostate { node: usize },
    #[error("non-finite particle {particle} at node {node}")]
    NonFiniteParticle { particle: usize, node: usize },
    #[error("sample {sample}: {source}")]
    Sample {
        sample: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("iteration {iter}: {source}")]
    Iteration {
        iter: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("malformed cloud file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at_sample(self, sample: usize) -> Self {
        Error::Sample {
            sample,
            source: Box::new(self),
        }
    }

    pub(crate) fn at_iter(self, iter: usize) -> Self {
        Error::Iteration {
            iter,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
