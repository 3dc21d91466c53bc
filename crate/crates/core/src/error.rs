use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Input values violate an operation's contract.
    #[error("validation error: {0}")]
    Validation(String),

    /// A binary tensor file or checkpoint is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// The support mask has no foreground pixel at feature resolution.
    /// The episode must be rejected and resampled.
    #[error("empty support mask at feature resolution")]
    EmptyMask,

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called outside its contract (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// Training diverged; the manifest line identifies the offending episode.
    #[error("non-finite loss at iteration {iteration}; episode: {manifest}")]
    NonFiniteLoss { iteration: usize, manifest: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
