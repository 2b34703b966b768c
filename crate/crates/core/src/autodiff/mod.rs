//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Every operation is evaluated eagerly when it is recorded, so a [`Graph`]
//! doubles as a record of the forward pass. Gradients are themselves
//! recorded as graph nodes, which means a gradient can be differentiated
//! again; this is what [`grad_through_update`] relies on to differentiate
//! through an inner gradient-descent step.

mod graph;
mod tensor;

pub use graph::{Graph, LeafKind, NodeId, PathwiseGrad};
pub use tensor::Tensor;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: String },
    #[error("gradient output node {0} is not a scalar")]
    NonScalarOutput(usize),
    #[error("node {0} is not part of the graph")]
    UnknownNode(usize),
    #[error("node {0} is not a leaf and cannot be bound")]
    NotALeaf(usize),
}

/// How the meta-gradient treats the inner adaptation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerGradMode {
    /// Stop-gradient through the inner gradient: dλ/dθ = I.
    #[default]
    FirstOrder,
    /// Keep the Hessian-vector term of the inner step.
    SecondOrder,
}

/// Gradient of `outer(θ − step·∇θ inner(θ))` with respect to `θ`.
///
/// `inner` and `outer` record their losses on the supplied graph given the
/// node holding their argument. Both must return scalar nodes.
pub fn grad_through_update<I, O>(
    theta: &Tensor,
    step: f64,
    mode: InnerGradMode,
    inner: I,
    outer: O,
) -> Result<Tensor, AutodiffError>
where
    I: FnOnce(&mut Graph, NodeId) -> Result<NodeId, AutodiffError>,
    O: FnOnce(&mut Graph, NodeId) -> Result<NodeId, AutodiffError>,
{
    let mut g = Graph::new();
    let th = g.param(theta.clone());
    let inner_loss = inner(&mut g, th)?;
    let mut inner_grad = g.grad(inner_loss, &[th])?[0];
    if mode == InnerGradMode::FirstOrder {
        inner_grad = g.detach(inner_grad)?;
    }
    let scaled = g.scale(inner_grad, step)?;
    let lambda = g.sub(th, scaled)?;
    let out = outer(&mut g, lambda)?;
    let grads = g.grad(out, &[th])?;
    Ok(g.value(grads[0]).clone())
}
