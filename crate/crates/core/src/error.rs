use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("{what} did not converge after {iterations} iterations (last delta {last_delta:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        last_delta: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("no connected graph found after {attempts} attempts; edge probability {edge_prob} is too small")]
    Disconnected { attempts: usize, edge_prob: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config field `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for failures that originate in the numerics rather than in user input or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Singular(_)
                | Error::NoConvergence { .. }
                | Error::NotPsd(_)
                | Error::Dimension(_)
                | Error::Disconnected { .. }
        )
    }
}
