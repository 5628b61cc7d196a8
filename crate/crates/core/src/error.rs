use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("index ({row}, {col}) out of range for a {n}x{n} matrix")]
    IndexOutOfRange { row: usize, col: usize, n: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("method {0} requires a positive matrix norm")]
    MissingMatrixNorm(&'static str),

    #[error("vector length {got} does not match matrix dimension {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("block dimensions cover {covered} entries, expected {expected}")]
    TilingMismatch { covered: u128, expected: u128 },

    #[error("norm estimate did not converge after {cols} columns (relative JSD {rel_jsd:.3e})")]
    NormNotConverged { cols: usize, rel_jsd: f64 },

    #[error("malformed H-matrix file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
