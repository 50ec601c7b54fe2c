use alloc::vec::Vec;

use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: Vec<usize>, actual: Vec<usize> },
    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape must have positive extents, got {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("log of non-positive value {value} at flat index {index}")]
    LogDomain { index: usize, value: f64 },
    #[error("operation `{0}` needs a second operand")]
    MissingOperand(&'static str),
    #[error("operation `{0}` takes a single operand")]
    UnexpectedOperand(&'static str),
    #[error("empty input")]
    Empty,
    #[error("k = {k} is outside 1..={len}")]
    KOutOfRange { k: usize, len: usize },
    #[error("invalid quantization parameters: {0}")]
    InvalidQuantParams(&'static str),
    #[error("bit-width {0} is outside 2..=8")]
    InvalidBits(u8),
    #[error("mask selects no elements")]
    EmptyMask,
    #[error("invalid scene configuration: {0}")]
    InvalidScene(&'static str),
    #[error("could not place {what} after {attempts} attempts")]
    PlacementFailed { what: &'static str, attempts: usize },
    #[error("layer {layer} does not exist (model has {count})")]
    BadLayer { layer: usize, count: usize },
    #[error("threshold {0} is outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("invalid calibration config: {0}")]
    InvalidConfig(&'static str),
    #[error("objective undefined: the inlier set is empty and the anomaly weight is zero")]
    EmptyInlierSet,
}
