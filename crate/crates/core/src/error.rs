use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("too many levels: {requested} requested, at most {max} fit a {height}x{width} image")]
    MaxLevels {
        requested: usize,
        max: usize,
        height: usize,
        width: usize,
    },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("inconsistent metadata: {0}")]
    InconsistentMetadata(String),
    #[error("weights do not match stream: {0}")]
    WeightsMismatch(String),
    #[error("corrupt payload in block {block}: {reason}")]
    CorruptPayload { block: usize, reason: String },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported image depth: maxval {0}")]
    UnsupportedDepth(u32),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error("decoder output differs from the encoder: {0}")]
    DecodeMismatch(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
