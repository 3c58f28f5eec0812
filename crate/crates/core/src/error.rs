use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A constraint system without full row rank, e.g. a continuum that is
    /// absent from one of the RVEs of an oversampled region.
    #[error("constraint degeneracy: {0}")]
    ConstraintDegeneracy(String),

    #[error("solver failure: {message} (relative residual {residual:e})")]
    Solver { message: String, residual: f64 },

    /// Ratio-type quantity whose denominator vanished.
    #[error("undefined: {0}")]
    Undefined(String),

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: msg.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
