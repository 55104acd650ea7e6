use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("transport error: {0}")]
    Transport(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Transport(_) => 5,
        }
    }

    /// Classifies a core error, prefixing `context` to the message.
    pub fn from_core(err: enroute_core::Error, context: &str) -> Self {
        use enroute_core::Error as E;
        let msg = format!("{context}: {err}");
        match err {
            E::Config(_) => CliError::Config(msg),
            E::Numeric(_) | E::Invariant(_) | E::MetricDomain(_) => CliError::Numeric(msg),
            _ => CliError::Data(msg),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Attaches context to core results.
pub trait Context<T> {
    fn context(self, what: &str) -> Result<T>;
}

impl<T> Context<T> for enroute_core::Result<T> {
    fn context(self, what: &str) -> Result<T> {
        self.map_err(|e| CliError::from_core(e, what))
    }
}
