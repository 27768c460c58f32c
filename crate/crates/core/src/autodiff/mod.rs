//! Dense `f64` tensors, a recording tape for reverse-mode differentiation,
//! and the ADAM optimizer.

mod adam;
mod ops;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use ops::{conv2d, conv2d_backward, elementwise, sigmoid, ElementwiseOp};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDimension(Vec<usize>),
    #[error("conv2d: input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("conv2d: kernel {kh}x{kw} must have odd sides")]
    EvenKernel { kh: usize, kw: usize },
    #[error("{0}: missing second operand")]
    MissingOperand(&'static str),
    #[error("{op}: index {index} out of bounds {bound}")]
    InvalidIndex {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("non-finite {what} at index {index}: {value}")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f64,
    },
}
