use std::path::PathBuf;

use scorefusion_tensor::TensorError;
use thiserror::Error;

/// Volume file parse failures, kept distinct so callers can tell a foreign
/// file from a damaged one.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: Vec<u8> },
    #[error("truncated payload: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("dimensions {dims:?} overflow the addressable voxel count")]
    DimOverflow { dims: [u64; 3] },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error on axis {axis}: {msg}")]
    Dimension { axis: usize, msg: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("paired volumes differ in dims: {a:?} vs {b:?}")]
    Pairing { a: [usize; 3], b: [usize; 3] },
    #[error("range error: {0}")]
    Range(String),
    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },
    #[error("consistency projection requires x in the range of A (max |Ax - x| = {residual:e})")]
    ConsistencyDomain { residual: f64 },
    #[error("config error: {0}")]
    Config(String),
    #[error("feature pyramid error: {0}")]
    Pyramid(String),
    #[error("timestep {t} outside [0, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Format(#[from] ParseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
