use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The pixel region a selection or score was asked for has no pixels.
    /// The harness turns this into a skipped sample rather than a failure.
    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("label map has no foreground pixels")]
    NoForeground,

    #[error("bridge: {0}")]
    Bridge(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors that mean "this sample cannot be scored" rather than
    /// "the run is broken".
    pub fn is_sample_skip(&self) -> bool {
        matches!(self, Error::EmptyRegion(_) | Error::NoForeground)
    }
}
