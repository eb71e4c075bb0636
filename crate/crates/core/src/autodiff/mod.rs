//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles. Leaves
//! are either trainable (they carry a gradient accumulator) or constant.
//! [`Graph::backward`] walks the tape in reverse and accumulates into every
//! trainable leaf; calling it twice doubles the gradients.

mod backward;
mod gradcheck;
pub(crate) mod kernels;
mod memory;
mod ops;

pub use gradcheck::{check_gradients, GradReport};
pub use memory::aux_loss_value_grad;
pub use ops::{LAYER_NORM_EPS, ROPE_BASE};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of one backward rule, used to prove that the
/// gradient oracles detect broken derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub op: &'static str,
    pub factor: f64,
}

impl Fault {
    /// Scales the GeLU backward rule by 1.01.
    pub fn gelu_backward() -> Self {
        Self {
            op: "gelu",
            factor: 1.01,
        }
    }
}

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddScalar { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CausalConv { x: Var, kernel: Var, seq_len: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { src: Var, idx: Vec<usize> },
    SliceRows { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ScaleRows { x: Var, s: Var },
    SumRows { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    TopM { a: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Rope { a: Var, seq_len: usize, heads: usize },
    Attention { q: Var, k: Var, v: Var, seq_len: usize, heads: usize, probs: Vec<f64> },
    Dropout { a: Var, mask: Vec<f64> },
    RankScores { q: Var, keys: Var, rank: usize },
    BilinearCells { row: Var, col: Var, core: Var, rank: usize, side: usize, cells: Vec<(usize, usize)> },
    AdditiveCells { row: Var, col: Var, side: usize, cells: Vec<(usize, usize)> },
    BlockPool { scores: Vec<Var>, values: Var, slots: Vec<(usize, usize)>, blocks: usize },
    AuxLoss { core: Var, dcore: Vec<f64> },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CausalConv { .. } => "causal_conv",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ScaleRows { .. } => "scale_rows",
            Op::SumRows { .. } => "sum_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::TopM { .. } => "top_m",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Rope { .. } => "rope",
            Op::Attention { .. } => "attention",
            Op::Dropout { .. } => "dropout",
            Op::RankScores { .. } => "rank_scores",
            Op::BilinearCells { .. } => "bilinear_cells",
            Op::AdditiveCells { .. } => "additive_cells",
            Op::BlockPool { .. } => "block_pool",
            Op::AuxLoss { .. } => "aux_loss",
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
    /// Accumulated gradient; present iff this node is a trainable leaf.
    pub grad: Option<Vec<f64>>,
}

/// A computation graph. Not `Sync`; build one per model instance and thread.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    precision: Precision,
    fault: Option<Fault>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            fault: None,
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf with a zeroed gradient accumulator.
    pub fn param(&mut self, mut value: Tensor) -> Var {
        self.precision.round_slice(value.data_mut());
        let grad = Some(vec![0.0; value.numel()]);
        self.push_node(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            grad,
        })
    }

    pub fn constant(&mut self, mut value: Tensor) -> Var {
        self.precision.round_slice(value.data_mut());
        self.push_node(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            grad: None,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a trainable leaf, `None` for anything else.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Appends an op node whose value has already been computed.
    pub(crate) fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        self.precision.round_slice(value.data_mut());
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(Node {
            value,
            op,
            needs_grad,
            grad: None,
        })
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::arg(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if let Some(acc) = self.nodes[i].grad.as_mut() {
                    acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                continue;
            }
            let scale = match self.fault {
                Some(f) if f.op == self.nodes[i].op.name() => f.factor,
                _ => 1.0,
            };
            let g = if scale != 1.0 {
                g.into_iter().map(|x| x * scale).collect()
            } else {
                g
            };
            self.backprop_node(i, &g, &mut adj);
        }
        Ok(())
    }

    /// Adjoint buffer for `v`, created zeroed on first use. Returns `None` when
    /// `v` does not need a gradient.
    pub(crate) fn adj_mut<'a>(
        &self,
        adj: &'a mut [Option<Vec<f64>>],
        v: Var,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(adj[v.0].get_or_insert_with(|| vec![0.0; len]))
    }
}

#[cfg(test)]
mod tests;
