//! Dense fp32 tensors with tape-based reverse-mode differentiation.
//!
//! The graph is generic over [`Real`] so the same kernels can be checked in
//! f64; models train and run in f32.

mod adam;
mod check;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{grad_check, grad_check_many, grad_check_report, GradCheckReport};
pub use graph::{softmax_in_place, Graph, NodeId};
pub use tensor::{Real, Tensor};


use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("cross-entropy needs at least one target")]
    NoTargets,
}
