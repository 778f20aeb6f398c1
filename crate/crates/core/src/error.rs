//! Error type shared across the crate.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter is outside its documented range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A data file does not conform to the feature-file or checkpoint format.
    #[error("format error: {0}")]
    Format(String),

    /// The requested construction is impossible for these parameters
    /// (e.g. Hadamard centers for a code length that is not a power of two).
    #[error("capability error: {0}")]
    Capability(String),

    /// Randomized generation exhausted its attempt budget.
    #[error("generation error: {0}")]
    Generation(String),

    /// Array dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A non-finite value or an undefined numeric operation was encountered.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An evaluation protocol cannot be built or queried.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Inconsistent configuration detected at startup.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
