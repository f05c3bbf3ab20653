use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("degenerate region after clipping: {0}")]
    DegenerateRegion(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("no positive proposals for instance (fall back to box fill): {0}")]
    NoPositiveProposals(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("format version mismatch: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },
    #[error("corrupt or truncated file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },
    #[error("run directory is locked: {}", .0.display())]
    Locked(PathBuf),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Maps an I/O error on `path` to [`Error::NotFound`] when appropriate.
    pub fn io_at(path: &std::path::Path, err: std::io::Error) -> Self {
        if err.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path.to_path_buf())
        } else {
            Error::Io(err)
        }
    }
}
