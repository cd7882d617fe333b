use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("scatterer at x = {x:.6} m, z = {z:.6} m lies outside the simulated time window")]
    OutOfWindow { x: f64, z: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("FWHM is unbounded: {0}")]
    UnboundedFwhm(String),

    #[error("non-finite loss ({0}); parameters left unchanged")]
    NonFiniteLoss(f64),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Session(#[from] crate::session::SessionError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
