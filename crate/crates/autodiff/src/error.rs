use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("attention width {width} is not divisible by {heads} heads")]
    HeadDivisibility { width: usize, heads: usize },
    #[error("loss must be a 1x1 scalar, got {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    CorruptFile { offset: usize, reason: String },
    #[error("config hash mismatch: stored {stored:016x}, computed {computed:016x}")]
    ConfigHashMismatch { stored: u64, computed: u64 },
}
