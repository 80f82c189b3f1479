//! The op tape: forward values plus enough structure to replay in reverse.

use crate::ops;
use crate::param::Param;
use crate::tensor::Tensor;
use crate::{AdError, Result};

/// Handle to a node in one [`Graph`]. Ids are only meaningful for the graph
/// that created them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Differentiable primitive attached to a node. Inputs are always earlier
/// nodes, so the tape is topologically sorted by construction.
pub(crate) enum Op {
    Leaf,
    ParamLeaf(Param),
    Add(NodeId, NodeId),
    /// `lhs + rhs` where `rhs`'s shape is a suffix of `lhs`'s shape and is
    /// repeated over the leading axes.
    AddBroadcast(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MulScalar(NodeId, f64),
    Matmul(NodeId, NodeId),
    Transpose(NodeId, usize, usize),
    Reshape(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    SumAxis(NodeId, usize),
    MeanAll(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Sqrt(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        /// Per-row mean over the last axis, saved by the forward pass.
        mean: Tensor,
        /// Per-row 1/std over the last axis, saved by the forward pass.
        invstd: Tensor,
    },
    CausalConv1d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        dilation: usize,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
}

/// Records a forward computation and differentiates it in reverse.
///
/// A graph is built per forward pass and thrown away afterwards; parameters
/// live outside the graph (see [`Param`]) and collect gradients across
/// [`Graph::backward`] calls until explicitly zeroed.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a non-trainable leaf (input data, masks, fixed encodings).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Insert a leaf backed by a trainable parameter; `backward` accumulates
    /// this leaf's gradient into the parameter.
    pub fn param(&mut self, p: &Param) -> NodeId {
        self.push(p.value(), Op::ParamLeaf(p.clone()))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if the node
    /// influenced the loss. Useful for probing input sensitivity.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Reverse-mode sweep from a scalar `loss` node. Gradients for trainable
    /// leaves are accumulated into their [`Param`]s; gradients for every
    /// visited node are retained and readable via [`Graph::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(AdError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.item().is_finite() {
            return Err(AdError::NonFinite { op: "backward" });
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].clone() else { continue };
            ops::backprop(self, i, &g)?;
        }
        Ok(())
    }
}

pub(crate) fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(t) => t.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_node_accumulates_both_paths() {
        // y = x*x + x  =>  dy/dx = 2x + 1
        let mut g = Graph::new();
        let p = Param::new("x", Tensor::scalar(3.0));
        let x = g.param(&p);
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(p.grad().item(), 7.0);
        assert_eq!(g.grad(x).unwrap().item(), 7.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, AdError::NonScalarLoss(_)));
    }

    #[test]
    fn grads_reset_between_backward_calls() {
        let mut g = Graph::new();
        let p = Param::new("x", Tensor::scalar(2.0));
        let x = g.param(&p);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        // Graph-side gradient is per-sweep...
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
        // ...while the param accumulates across sweeps until zeroed.
        assert_eq!(p.grad().item(), 8.0);
        p.zero_grad();
        assert_eq!(p.grad().item(), 0.0);
    }

    #[test]
    fn nodes_after_loss_are_ignored() {
        let mut g = Graph::new();
        let p = Param::new("x", Tensor::scalar(5.0));
        let x = g.param(&p);
        let y = g.mul_scalar(x, 2.0).unwrap();
        let _unrelated = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(p.grad().item(), 2.0);
    }
}
