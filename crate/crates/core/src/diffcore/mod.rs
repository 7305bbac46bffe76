//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The engine is an eager tape: every operation computes its value immediately
//! and records a node in a [`Graph`]. [`backward`] emits the adjoint
//! computation as ordinary graph nodes built from the same kernel set, so the
//! returned gradients can themselves be differentiated (second order and
//! beyond). Deterministic randomness comes from counter-based [`RngStream`]s,
//! and named parameter sets live in [`ParamStore`] checkpoints.

mod gradcheck;
mod graph;
mod rng;
mod store;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_grad, max_rel_err, rel_err, GradCheckReport};
pub use graph::{backward, second_order_grad, Graph, Var};
pub use rng::RngStream;
pub use store::{ParamStore, StoreError};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by graph construction and differentiation.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: domain error at flat index {index} (value {value})")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },
    #[error("{0}")]
    ContractViolation(String),
}
