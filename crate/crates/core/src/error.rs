use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HolonomyError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("pool covariance has no positive eigenvalue")]
    ZeroVariance,
    #[error("k = {k} exceeds pool size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("stacked neighbor cloud is identically zero")]
    DegenerateCloud,
    #[error("matrix is not orthogonal (max |HᵀH - I| = {0:e})")]
    NotOrthogonal(f64),
    #[error("loop is not closed: last point differs from first")]
    LoopNotClosed,
    #[error("shift path does not return to the origin")]
    NotClosed,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("row transport needs the pool's input rows and a feature map")]
    MissingPoolInputs,
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("non-finite entry at row {row}, column {col}")]
    NonFiniteEntry { row: usize, col: usize },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("input missing: {}", .0.display())]
    InputMissing(PathBuf),
    #[error("unknown command: {0}")]
    UnknownCommand(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HolonomyError>;
