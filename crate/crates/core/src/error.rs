use thiserror::Error;

/// Crate-wide error type.  Variants map onto the CLI exit-code classes:
/// everything except `Numeric` is a data/usage problem, `Numeric` signals a
/// diverged or non-finite computation.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or sizes that do not line up (map vs. ground truth, factor not
    /// dividing dimensions, parameter count mismatch, ...).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation that needs a non-empty support got an empty one
    /// (e.g. pair sampling on an all-background ground truth).
    #[error("empty domain: {0}")]
    EmptyDomain(String),

    /// Malformed files, configs or containers.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite or otherwise failed numerics.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn empty_domain(msg: impl Into<String>) -> Self {
        Error::EmptyDomain(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
