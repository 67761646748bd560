//! Reverse-mode differentiation substrate.
//!
//! [`Graph`] records every operation of a forward pass; [`Graph::backward`]
//! replays it in reverse. On top of the usual network primitives it carries
//! the two operators that surrogate gradients are built from:
//! [`Graph::stop_gradient`] and [`Graph::straight_through`]. Softmax plays the
//! role of the continuous relaxation of argmax throughout the crate.

mod check;
mod graph;

pub use check::{check_gradient, finite_difference_gradient, GradCheckReport};
pub use graph::{Gradients, Graph, Var, LOG_FLOOR};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("target index {target} out of range for {size} classes")]
    TargetOutOfRange { target: usize, size: usize },
    #[error("function value is not finite at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
}

/// Negative log-likelihood of `target` under the probability vector `s`.
pub fn nll_loss<'g>(s: Var<'g>, target: usize) -> Result<Var<'g>, GradError> {
    let size = s.value().last_dim();
    if target >= size {
        return Err(GradError::TargetOutOfRange { target, size });
    }
    let flat = s.reshape([1, size]);
    Ok(flat.pick_last(&[target]).ln().sum().scale(-1.0))
}

/// Mean negative log-likelihood over the rows of `scores` (`[N, V]`) whose
/// `weights` entry is nonzero; `weights` is 1 for scored rows, 0 otherwise.
pub fn masked_nll<'g>(scores: Var<'g>, targets: &[usize], weights: &[f64]) -> Result<Var<'g>, GradError> {
    let size = scores.value().last_dim();
    if let Some(&target) = targets.iter().find(|&&t| t >= size) {
        return Err(GradError::TargetOutOfRange { target, size });
    }
    let total: f64 = weights.iter().sum();
    let g = scores.graph();
    let picked = scores.pick_last(targets).ln();
    let w = g.constant(crate::tensor::Tensor::new(picked.shape(), weights.to_vec()));
    Ok(picked.mul(w).sum().scale(-1.0 / total.max(1.0)))
}
