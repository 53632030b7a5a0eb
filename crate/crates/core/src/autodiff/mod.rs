//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] is rebuilt for every forward pass. Elementwise operations only
//! broadcast between a scalar and a tensor; matrix products require matching
//! inner dimensions.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheck, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite gradient at node {node} ({op})")]
    NonFiniteGradient { op: &'static str, node: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
}
