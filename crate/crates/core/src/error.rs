use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid stage plan: {0}")]
    InvalidPlan(String),

    #[error("cannot normalize: {0}")]
    Normalization(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("lda: {0}")]
    Lda(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("template {index} has norm {norm}, expected unit length")]
    NormViolation { index: usize, norm: f64 },

    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short category tag used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidPlan(_) | Error::InvalidArgument(_) => "invalid-input",
            Error::Normalization(_) => "normalization",
            Error::DimensionMismatch { .. } => "dimension",
            Error::Lda(_) => "lda",
            Error::Format(_) | Error::Version { .. } => "format",
            Error::SizeMismatch(_) => "size",
            Error::NormViolation { .. } => "norm",
            Error::Io(_) => "io",
        }
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, actual })
    }
}
