use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data has the wrong layout (channel count, pixel format).
    #[error("format error: {0}")]
    Format(String),
    /// Spatial dimensions violate a divisibility or size requirement.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Architecture or parameter layout inconsistency.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset content is missing or malformed.
    #[error("data error: {0}")]
    Data(String),
    /// A value left its valid numeric domain (non-finite loss, singularity, out-of-range input).
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptArchive(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
