use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("cross-entropy has no unmasked positions")]
    EmptyLoss,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("empty collection: {0}")]
    Empty(&'static str),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    InvalidToken { id: u32, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("step {step} outside 1..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("layer {layer} out of range for {layers} layers")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("token index {index} beyond cache length {len}")]
    CacheIndex { index: usize, len: usize },
    #[error("cache inconsistency: {0}")]
    CacheInconsistent(String),
    #[error("skip mask for {site} has length {got}, expected {expected}")]
    MaskLength {
        site: String,
        got: usize,
        expected: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("non-finite loss at step {step}: {snapshot}")]
    NonFiniteLoss { step: usize, snapshot: String },
    #[error("trace line {line}: {msg}")]
    Trace { line: usize, msg: String },
    #[error("{0}")]
    Insufficient(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
