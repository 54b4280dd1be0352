use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("mesh nodes must be strictly increasing inside (-{limit}, {limit}); offending index {index}")]
    NonMonotoneNodes { index: usize, limit: f64 },

    #[error("exterior width {width} is not an integer multiple of the step {step}")]
    ExteriorNotCommensurate { width: f64, step: f64 },

    #[error("bad extents: {0}")]
    BadExtents(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("mode index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("boundary history holds {actual} levels, expected {expected}")]
    HistoryLengthMismatch { expected: usize, actual: usize },

    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    #[error("negative energy norm square {0:e}; the shift v_hat is too small")]
    NegativeEnergyNorm(f64),

    #[error("step matrix is singular")]
    SingularStepMatrix,

    #[error("transparent boundary conditions need a uniform time mesh")]
    NonuniformTimeMesh,

    #[error("meshes do not match: {0}")]
    MeshMismatch(String),

    #[error("an order fit needs at least 3 levels, got {0}")]
    InsufficientLevels(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}
