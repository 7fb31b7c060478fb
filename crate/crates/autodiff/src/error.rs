use thiserror::Error;

use crate::tensor::Dtype;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dtype mismatch in {op}: expected {expected:?}, got {got:?}")]
    DtypeMismatch {
        op: &'static str,
        expected: Dtype,
        got: Dtype,
    },
    #[error("buffer length {len} does not match shape {shape:?}")]
    BadBuffer { shape: Vec<usize>, len: usize },
    #[error("axis {axis} out of range for rank {rank} in {op}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op} requires the last two dimensions to be equal and even, got {shape:?}")]
    OddDimensions { op: &'static str, shape: Vec<usize> },
    #[error("conv2d channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("backward requires a real scalar loss, got shape {shape:?} ({dtype:?})")]
    NonScalarLoss { shape: Vec<usize>, dtype: Dtype },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
