//! Differentiation engine: a reverse-mode tape over batched arrays, forward
//! tangents recorded on that tape, and the Adam optimizer.

mod adam;
mod dual;
mod graph;
mod tensor;

pub use adam::{AdamState, LrSchedule};
pub use dual::{directional, Dual, Tangent};
pub use graph::{Gradients, Graph, Var};
pub use tensor::{Binder, DualBinder, Tensor, ValueBinder, VarBinder};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite value in backward pass at `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("non-finite gradient component at index {index}")]
    NonFiniteGradient { index: usize },
    #[error("loss must be 1x1, got {}x{}", shape.0, shape.1)]
    NotScalar { shape: (usize, usize) },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}
