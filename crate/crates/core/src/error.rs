use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("eigensolver did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },

    /// No region survived thresholding and filtering; callers fall back to
    /// random crops.
    #[error("no regions to sample from")]
    NoRegions,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::NoRegions => 2,
            Error::Numeric(_) | Error::NoConvergence { .. } => 3,
            Error::Io(_) | Error::Format(_) => 4,
        }
    }
}
