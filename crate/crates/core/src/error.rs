use thiserror::Error;

/// Errors raised by estimation, data handling and configuration.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("component {component} is degenerate (total responsibility {mass:.3e})")]
    DegenerateComponent { component: usize, mass: f64 },

    #[error("I/O error: {0}")]
    Io(String),
}

impl Error {
    /// Process exit status used by the command-line driver: 1 for data and
    /// configuration problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) | Error::DegenerateComponent { .. } => 2,
            _ => 1,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
