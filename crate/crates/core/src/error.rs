use thiserror::Error;

use crate::scene::RegionId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty proposals")]
    EmptyProposals,
    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),
    #[error("box {bbox:?} outside image {width}x{height}")]
    OutOfBounds { bbox: [f64; 4], width: f64, height: f64 },
    #[error("invalid image size {0}x{1}")]
    InvalidImage(f64, f64),
    #[error("duplicate or reserved region id {0}")]
    BadRegionId(RegionId),
    #[error("region {0} not found")]
    RegionNotFound(RegionId),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty expression")]
    EmptyExpression,
    #[error("token index {index} out of range for vocabulary of size {size}")]
    TokenOutOfRange { index: usize, size: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("missing score for pair ({0}, {1})")]
    MissingScore(RegionId, RegionId),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("scene placement failed after {0} attempts")]
    Placement(usize),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
