use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("seed outside volume: {0:?}")]
    SeedOutsideVolume([i64; 3]),

    #[error("seed outside tissue domain at voxel {0:?}")]
    SeedOutsideTissue([usize; 3]),

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("static model: no diffusion and no proliferation")]
    StaticModel,

    #[error("time step {dt} exceeds stability limit {limit}")]
    Unstable { dt: f64, limit: f64 },

    #[error("malformed header in {path}: {msg}")]
    MalformedHeader { path: PathBuf, msg: String },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("payload length mismatch: expected {expected} bytes, got {actual}")]
    PayloadLength { expected: u64, actual: u64 },

    #[error("magic mismatch: not a surrogate weight file")]
    BadMagic,

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("shape mismatch for {name}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value in tensor {0}")]
    NonFinite(String),

    #[error("channel mismatch: kernel expects {expected} input channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("parameter out of training range: {name}={value} not in [{lo}, {hi}]")]
    OutOfTrainingRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("empty mask")]
    EmptyMask,

    #[error("degenerate weights: all importance weights vanished")]
    DegenerateWeights,

    #[error("no valid seed found after {0} attempts")]
    NoValidSeed(usize),

    #[error("tempering did not reach p = 1 within {0} stages")]
    NoConvergence(usize),

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
