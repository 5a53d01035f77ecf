use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// A single violated modelling assumption.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Violation {
    /// Short tag such as `A2` or `q>0`.
    pub assumption: String,
    pub detail: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.assumption, self.detail)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("assumption violated: {}", join(.0))]
    Assumption(Vec<Violation>),

    #[error("bracket failure: {0}")]
    Bracket(String),

    #[error("moment order {order} outside the finite range [0, {max}]")]
    OrderOutOfRange { order: f64, max: f64 },

    #[error("simulation horizon {horizon} exceeded")]
    HorizonExceeded { horizon: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("resource cap hit: {0}")]
    ResourceCap(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

impl Error {
    pub fn assumption(tag: &str, detail: impl Into<String>) -> Self {
        Error::Assumption(vec![Violation { assumption: tag.to_string(), detail: detail.into() }])
    }
}
