//! Backward-graph nodes.

use std::fmt;
use std::rc::Rc;

use crate::ops::OpKind;
use crate::recompute::ChainProgram;
use crate::tensor::{Shape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Where a node sends the gradient of one of its inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edge {
    Node(NodeId),
    Leaf(TensorId),
}

/// Backward function of a node.
#[derive(Debug, Clone)]
pub enum Bfn {
    /// The op's own VJP over `stn` (in `saves_for_vjp` order).
    Vjp {
        op: OpKind,
        c: f64,
        input_shapes: Vec<Option<Shape>>,
    },
    /// Collapsed forward-mode chain: `grad_src = g ⊙ stn[0]`.
    MulFtr,
    /// Re-run the chain from the saved source `stn[0]`, then back-propagate
    /// through it.
    Recompute { chain: Rc<ChainProgram> },
}

#[derive(Debug)]
pub struct TapeNode {
    pub id: NodeId,
    pub op_name: &'static str,
    pub bfn: Bfn,
    /// Saved tensors, held until this node's backward runs.
    pub stn: Vec<TensorId>,
    /// One entry per operand slot; `None` for constants and dead inputs.
    pub nxn: Vec<Option<Edge>>,
    pub out_shape: Shape,
    /// Node belongs to an element-wise (activation) chain.
    pub activation: bool,
    pub(crate) grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<TapeNode>,
    pub(crate) consumed: bool,
}

impl Tape {
    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub(crate) fn push(&mut self, mut node: TapeNode) -> NodeId {
        let id = NodeId(self.nodes.len());
        node.id = id;
        for e in node.nxn.iter().flatten() {
            if let Edge::Node(n) = e {
                debug_assert!(n.0 < id.0, "next-node links must point backwards");
            }
        }
        self.nodes.push(node);
        id
    }
}
