use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between operands; both shapes are named.
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    /// A configuration value (or combination) is invalid.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation was called in a state its contract forbids.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A NaN or infinity appeared where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl Error {
    pub fn shape(op: &'static str, lhs: impl std::fmt::Display, rhs: impl std::fmt::Display) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_string(),
            rhs: rhs.to_string(),
        }
    }
}
