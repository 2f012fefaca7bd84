use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty tensor")]
    EmptyTensor,
    #[error("non-finite weight")]
    NonFinite,
    #[error("code out of range: {0}")]
    CodeOutOfRange(i32),
    #[error("unsupported bit-width {0}")]
    UnsupportedBits(u32),
    #[error("index out of range: {index} >= {rows}")]
    IndexOutOfRange { index: u64, rows: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("diverged")]
    Diverged,
    #[error("undefined AUC: all labels belong to one class")]
    UndefinedAuc,
    #[error("replica drift")]
    ReplicaDrift,
    #[error("invalid batch: {0}")]
    Batch(String),
}

impl Error {
    pub(crate) fn shape(expected: usize, got: usize) -> Self {
        Error::ShapeMismatch { expected, got }
    }
}
