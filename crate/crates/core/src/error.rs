use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header {path}: {message}")]
    Header { path: PathBuf, message: String },

    #[error("size mismatch: expected {expected} elements, found {found}")]
    SizeMismatch { expected: usize, found: usize },

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("mask value {value} at voxel {index} is not 0 or 1")]
    NotBinary { index: usize, value: u8 },

    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid extreme points: {0}")]
    InvalidPoints(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("seed map has no foreground seeds")]
    NoForegroundSeeds,

    #[error("seed map has no background seeds")]
    NoBackgroundSeeds,

    #[error(
        "background seeds are empty: the object fills the crop, increase the padding \
         or lower the background radius"
    )]
    EmptyBackground,

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NotConverged { .. } | Error::NonFiniteLoss { .. })
    }
}
