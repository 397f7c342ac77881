use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("jacobi sweeps did not converge after {sweeps} sweeps")]
    ConvergenceFailure { sweeps: usize },

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("forward trace is stale (trace version {trace}, stack version {stack})")]
    StaleTrace { trace: u64, stack: u64 },

    #[error("non-finite activation: {0}")]
    NonFiniteActivation(String),

    #[error("non-finite gradient in buffer {buffer}")]
    NonFiniteGradient { buffer: usize },

    #[error("warmup ratio {0} outside [0, 1)")]
    InvalidRatio(f64),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("merge discrepancy {discrepancy:e} exceeds {threshold:e}")]
    MergeDiscrepancy { discrepancy: f64, threshold: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype {0}")]
    UnsupportedDtype(u8),

    #[error("truncated payload: needed {needed} bytes, found {found}")]
    TruncatedPayload { needed: usize, found: usize },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumError { stored: u32, computed: u32 },

    #[error("bad format: {0}")]
    BadFormat(String),

    #[error("unsupported maxval {0}")]
    UnsupportedMaxval(u32),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures of the numerics (divergence, non-convergence,
    /// merge drift) as opposed to bad input data.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::ConvergenceFailure { .. }
                | Error::NonFiniteActivation(_)
                | Error::NonFiniteGradient { .. }
                | Error::MergeDiscrepancy { .. }
        )
    }
}
