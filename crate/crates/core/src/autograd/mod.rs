//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every intermediate value. Operations append a node holding
//! the forward value and whatever the backward rule needs; [`Tape::backward`]
//! walks the nodes in reverse insertion order, which is a topological order
//! because every operation's inputs already exist when it is recorded.
//!
//! Binary elementwise operations broadcast only across axes of extent 1 and
//! only between tensors of equal rank.

mod check;
mod ops;

pub use check::grad_check;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },
    #[error("{op}: input is not symmetric")]
    NotSymmetric { op: &'static str },
    #[error("symmetric eigen-solver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; call reset_grads first")]
    BackwardAlreadyRun,
    #[error("non-finite value at coordinate {coordinate}")]
    NonFinite { coordinate: usize },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Log(Var),
    Powf(Var, f64),
    ClampMin(Var, f64),
    Sum(Var),
    LayerNorm {
        input: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Gram(Var),
    Trace(Var),
    FrobeniusSq(Var),
    SymEig {
        input: Var,
        vectors: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass and replays them backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (a parameter or an input under test).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        self.value(var).item()
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`] call.
    pub fn grad(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Clears gradients so another loss on the same forward values can be
    /// differentiated.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(id)
    }

    pub(crate) fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Populates the gradient of every differentiable ancestor of `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutogradError> {
        if self.backward_done {
            return Err(AutogradError::BackwardAlreadyRun);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutogradError::NonScalarLoss { shape });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::filled(&shape, 1.0));
        for id in (0..=loss.0).rev() {
            let Some(upstream) = self.grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !matches!(node.op, Op::Leaf) {
                let contributions = ops::backward_rule(&self.nodes_view(), id, &upstream)?;
                for (input, g) in contributions {
                    if self.nodes[input.0].requires_grad {
                        accumulate(&mut self.grads[input.0], g);
                    }
                }
            }
            self.grads[id] = Some(upstream);
        }
        Ok(())
    }

    fn nodes_view(&self) -> NodesView<'_> {
        NodesView { nodes: &self.nodes }
    }
}

/// Read-only access to forward values and ops during backward.
pub(crate) struct NodesView<'a> {
    nodes: &'a [Node],
}

impl NodesView<'_> {
    pub(crate) fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub(crate) fn op(&self, id: usize) -> &Op {
        &self.nodes[id].op
    }

    pub(crate) fn output(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}
