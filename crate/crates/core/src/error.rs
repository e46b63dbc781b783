use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("cycle detected in computation graph at node {0}")]
    Cycle(usize),

    #[error("invalid polygon: {0}")]
    InvalidPolygon(String),

    #[error("empty transcript on a non-ignored word")]
    EmptyTranscript,

    #[error("point {index} at ({x:.3}, {y:.3}) lies outside the {width}x{height} map")]
    OutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("infeasible alignment: {frames} frames cannot carry a label needing {required}")]
    Infeasible { frames: usize, required: usize },

    #[error("no feasible (sequence, label) pairs")]
    NoFeasiblePairs,

    #[error("brute-force oracle limited to {max} frames, got {frames}")]
    OracleScale { frames: usize, max: usize },

    #[error("training diverged at step {step}: loss {loss} exceeds {limit}")]
    Divergence { step: usize, loss: f64, limit: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by NaN/inf or optimisation blow-up.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Divergence { .. } | Error::Infeasible { .. }
        )
    }
}
