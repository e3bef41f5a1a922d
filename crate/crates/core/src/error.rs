use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("model dim {dim} is not divisible by {heads} heads")]
    HeadDivision { dim: usize, heads: usize },
    #[error("sequence too short in {op}: got {got}, need at least {need}")]
    Length { op: &'static str, got: usize, need: usize },
    #[error("index {index} out of range for {what} of size {size}")]
    Index { what: &'static str, index: usize, size: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("target of length {target_len} cannot be aligned to {frames} frames")]
    InfeasibleAlignment { target_len: usize, frames: usize },
    #[error("brute-force oracle too large: {0} paths")]
    OracleTooLarge(u128),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("sequence of {len} positions exceeds context of {max}")]
    ContextLength { len: usize, max: usize },
    #[error("no positions contribute to the loss")]
    DegenerateLoss,
    #[error("word error rate undefined for an empty reference")]
    EmptyReference,
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("training aborted: {0}")]
    Aborted(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}
