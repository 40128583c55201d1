use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} has {} elements but {len} values were given", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("cannot reshape {from:?} into {to:?}")]
    Reshape { from: Vec<usize>, to: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Incompatible {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("cannot split {shape:?} on axis {axis} into {sizes:?}")]
    Split {
        shape: Vec<usize>,
        axis: usize,
        sizes: Vec<usize>,
    },
    #[error("{op}: kernel {kernel:?} does not fit padded input {padded:?}")]
    KernelTooLarge {
        op: &'static str,
        kernel: Vec<usize>,
        padded: Vec<usize>,
    },
    #[error("{op}: stride must be at least 1")]
    ZeroStride { op: &'static str },
    #[error("{op}: input must be non-negative with a positive sum")]
    NotNormalizable { op: &'static str },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardTwice,
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("variable does not belong to this tape")]
    UnknownVar,
}
