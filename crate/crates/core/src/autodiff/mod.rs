//! Reverse-mode differentiation over dense tensors.
//!
//! Graphs are built define-by-run: every op on a [`Var`] evaluates
//! immediately and appends a node. Backward passes emit their gradients as
//! new nodes, so a gradient can itself be differentiated (this is what the
//! gradient-penalty term needs).

mod graph;

pub use graph::{AutodiffError, Gradients, Graph, NodeId, Result, Var, NO_INDEX};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of the scalar `output` against central
/// differences with step `h`, perturbing every element of every leaf in
/// `leaves`. Returns `max |analytic − numeric| / (|analytic| + h)`.
pub fn finite_diff_check<'g, T: Scalar>(
    graph: &'g Graph<T>,
    output: Var<'g, T>,
    leaves: &[Var<'g, T>],
    h: f64,
) -> Result<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic: Vec<Tensor<T>> = graph
        .grad(output, leaves, None)?
        .into_iter()
        .map(|g| (*g.value()).clone())
        .collect();
    let mut worst = 0.0f64;
    for (leaf, grad) in leaves.iter().zip(&analytic) {
        let base = (*leaf.value()).clone();
        for j in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[j] = t.data()[j] + T::lit(delta);
                let out = graph.replay(&[(*leaf, t)], &[output])?;
                Ok(out[0].item().to_f64_lossy())
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            let a = grad.data()[j].to_f64_lossy();
            worst = worst.max((a - numeric).abs() / (a.abs() + h));
        }
    }
    Ok(worst)
}
