use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid route: {0}")]
    InvalidRoute(String),

    #[error("invalid partition: cannot split {n} segments into {k} parts")]
    InvalidPartition { n: usize, k: usize },

    #[error("invalid interval: {0}")]
    InvalidInterval(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    #[error("profile for route {0} already exists")]
    Conflict(String),

    #[error("no profile for route {0}")]
    NotFound(String),

    #[error("part index {index} out of range 1..={k}")]
    Range { index: usize, k: usize },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("metric domain error: {0}")]
    MetricDomain(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used on the service wire.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidRoute(_) => "invalid_route",
            Error::InvalidPartition { .. } => "invalid_partition",
            Error::InvalidInterval(_) => "invalid_interval",
            Error::Config(_) => "config",
            Error::Shape { .. } => "shape",
            Error::Numeric(_) => "numeric",
            Error::State(_) => "state",
            Error::Conflict(_) => "conflict",
            Error::NotFound(_) => "not_found",
            Error::Range { .. } => "range",
            Error::Invariant(_) => "invariant",
            Error::MetricDomain(_) => "metric_domain",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
