use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The ridge system could not be factored; retry with a positive ridge
    /// coefficient.
    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("study aborted: {0}")]
    StudyAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Whether the failure is numerical (solver, factorization, domain)
    /// rather than a malformed request.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::IllConditioned(_) | Error::Numeric(_) | Error::StudyAborted(_)
        )
    }
}

pub(crate) fn check_dim(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::invalid(format!(
            "{what} has length {got}, expected {expected}"
        )));
    }
    Ok(())
}
