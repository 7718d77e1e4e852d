use thiserror::Error;

pub type Result<T, E = AptError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AptError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("token id {id} is outside the {side} vocabulary of size {size}")]
    OutOfVocab { side: &'static str, id: usize, size: usize },

    #[error("sequence length {len} exceeds max_len {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("budget exceeded: {0}")]
    Budget(String),

    #[error("teacher provides {found} layers but the fusion bank expects {expected}")]
    LayerCount { expected: usize, found: usize },

    #[error(
        "representation width mismatch: student {student} vs teacher {teacher}; \
         configure the teacher hidden size to equal the student d_model"
    )]
    DimensionMismatch { student: usize, teacher: usize },

    #[error("teacher distribution row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },

    #[error("backward: {0}")]
    Backward(String),

    #[error("tokenization misalignment: {0}")]
    Misaligned(String),

    #[error("incompatible parameter `{name}`: {detail}")]
    Incompatible { name: String, detail: String },

    #[error("degenerate synthetic task: {0}")]
    DegenerateSpec(String),

    #[error("invalid integration plan: {}", .0.join("; "))]
    Plan(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AptError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        AptError::Shape { op, detail: detail.into() }
    }

    /// Stable machine-readable code used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            AptError::Shape { .. } => "E_SHAPE",
            AptError::NonFinite { .. } => "E_NUMERIC",
            AptError::OutOfVocab { .. } => "E_VOCAB",
            AptError::LengthOverflow { .. } => "E_LENGTH",
            AptError::LengthMismatch(_) => "E_LENGTH",
            AptError::EmptyCorpus => "E_EMPTY",
            AptError::Config(_) => "E_CONFIG",
            AptError::Budget(_) => "E_BUDGET",
            AptError::LayerCount { .. } => "E_LAYERS",
            AptError::DimensionMismatch { .. } => "E_DIM",
            AptError::NotNormalized { .. } => "E_NORM",
            AptError::Backward(_) => "E_BACKWARD",
            AptError::Misaligned(_) => "E_ALIGN",
            AptError::Incompatible { .. } => "E_INCOMPATIBLE",
            AptError::DegenerateSpec(_) => "E_SPEC",
            AptError::Plan(_) => "E_PLAN",
            AptError::Checkpoint(_) => "E_CHECKPOINT",
            AptError::Version { .. } => "E_VERSION",
            AptError::Io(_) => "E_IO",
            AptError::Json(_) => "E_JSON",
        }
    }
}
