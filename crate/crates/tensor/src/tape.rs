use std::fmt;

use crate::error::{Result, TensorError};
use crate::ops::{layout, linalg, pointwise, reduce};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed set of differentiable operators the tape knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Leaf,
    MatMul,
    Conv2d,
    Add,
    Mul,
    /// Concatenation and its inverse, slicing along one axis.
    Concat,
    Split,
    Reshape,
    Transpose,
    Mean,
    Softmax,
    LayerNorm,
    Gelu,
    Relu,
    L2Normalize,
    AbsSum,
    Log,
    Exp,
    BilinearUpsample2x,
    PatchMerge,
    /// Multiplication by, or addition of, a fixed scalar.
    Scalar,
}

impl OpKind {
    /// Every operator except `Leaf`.
    pub const ALL: [OpKind; 20] = [
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::Add,
        OpKind::Mul,
        OpKind::Concat,
        OpKind::Split,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Mean,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::L2Normalize,
        OpKind::AbsSum,
        OpKind::Log,
        OpKind::Exp,
        OpKind::BilinearUpsample2x,
        OpKind::PatchMerge,
        OpKind::Scalar,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape { x: Var },
    Transpose { x: Var, perm: Vec<usize> },
    Mean { x: Var, axis: Option<usize> },
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Gelu { x: Var },
    Relu { x: Var },
    L2Normalize { x: Var },
    AbsSum { x: Var },
    Log { x: Var },
    Exp { x: Var },
    Upsample2x { x: Var },
    PatchMerge { x: Var },
}

impl Op {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } | Op::AddScalar { .. } => OpKind::Scalar,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Split,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Mean { .. } => OpKind::Mean,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Relu { .. } => OpKind::Relu,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::AbsSum { .. } => OpKind::AbsSum,
            Op::Log { .. } => OpKind::Log,
            Op::Exp { .. } => OpKind::Exp,
            Op::Upsample2x { .. } => OpKind::BilinearUpsample2x,
            Op::PatchMerge { .. } => OpKind::PatchMerge,
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        match self.kind() {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Concat => "concat",
            OpKind::Split => "split",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Mean => "mean",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::AbsSum => "abs_sum",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::BilinearUpsample2x => "bilinear_upsample_2x",
            OpKind::PatchMerge => "patch_merge",
            OpKind::Scalar => "scalar",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Conv2d { x, w, b } => vec![*x, *w, *b],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Slice { x, .. }
            | Op::Reshape { x }
            | Op::Transpose { x, .. }
            | Op::Mean { x, .. }
            | Op::Softmax { x }
            | Op::Gelu { x }
            | Op::Relu { x }
            | Op::L2Normalize { x }
            | Op::AbsSum { x }
            | Op::Log { x }
            | Op::Exp { x }
            | Op::Upsample2x { x }
            | Op::PatchMerge { x } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    retain_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A Wengert list: values are computed eagerly as ops are recorded, and
/// [`Tape::backward`] replays the list in reverse to accumulate gradients.
///
/// Leaves keep their gradients after `backward`; intermediate gradients are
/// released as soon as they have been propagated unless [`Tape::retain_grad`]
/// was called on them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            retain_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Op kinds in recording order.
    pub fn kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    /// Inputs of the op that produced `v` (empty for leaves).
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Copies `v` into a new leaf that carries no gradient history.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Keeps the gradient of an intermediate value after `backward`.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain_grad = true;
    }

    /// Accumulated gradient of `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    /// Clears every gradient so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar { index: v.0, len: self.nodes.len() })
        }
    }

    /// Appends a computed value. Fails when the value is not finite.
    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            retain_grad: false,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients accumulate additively into every reachable value that
    /// requires one. Running it twice without [`Tape::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let value = &self.nodes[loss.0].value;
        if value.numel() != 1 {
            return Err(TensorError::NotScalar { shape: value.shape().to_vec() });
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &g)?;
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) || node.retain_grad {
                node.grad = Some(g);
            }
            for (v, dg) in contributions {
                if dg.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFiniteGradient { op: self.nodes[i].op.name() });
                }
                let target = &mut self.nodes[v.0];
                match &mut target.grad {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                    None => target.grad = Some(dg),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each input that needs one.
    fn input_grads(&self, i: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        let mut grads = Vec::new();
        let mut emit = |v: Var, dg: Option<Vec<f64>>| {
            if let Some(dg) = dg {
                grads.push((v, dg));
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (da, db) = linalg::matmul_backward(val(a), val(b), g, needs(a), needs(b));
                emit(*a, da);
                emit(*b, db);
            }
            Op::Conv2d { x, w, b } => {
                let (dx, dw, db) = linalg::conv2d_backward(val(x), val(w), g, needs(x), needs(w), needs(b));
                emit(*x, dx);
                emit(*w, dw);
                emit(*b, db);
            }
            Op::Add { a, b } => {
                emit(*a, needs(a).then(|| g.to_vec()));
                emit(*b, needs(b).then(|| pointwise::reduce_broadcast(g, val(b).numel())));
            }
            Op::Mul { a, b } => {
                let (da, db) = pointwise::mul_backward(val(a), val(b), g, needs(a), needs(b));
                emit(*a, da);
                emit(*b, db);
            }
            Op::Scale { x, c } => emit(*x, Some(g.iter().map(|v| v * c).collect())),
            Op::AddScalar { x } => emit(*x, Some(g.to_vec())),
            Op::Concat { parts, axis } => {
                let shapes: Vec<&[usize]> = parts.iter().map(|p| val(p).shape()).collect();
                for (p, dg) in parts.iter().zip(layout::concat_backward(&shapes, *axis, g)) {
                    if needs(p) {
                        emit(*p, Some(dg));
                    }
                }
            }
            Op::Slice { x, axis, start } => {
                emit(*x, Some(layout::slice_backward(val(x).shape(), out.shape(), *axis, *start, g)));
            }
            Op::Reshape { x } => emit(*x, Some(g.to_vec())),
            Op::Transpose { x, perm } => {
                emit(*x, Some(layout::transpose_backward(out.shape(), perm, g)));
            }
            Op::Mean { x, axis } => emit(*x, Some(reduce::mean_backward(val(x).shape(), *axis, g))),
            Op::Softmax { x } => emit(*x, Some(reduce::softmax_backward(out, g))),
            Op::LayerNorm { x, gamma, beta } => {
                let (dx, dgamma, dbeta) = reduce::layer_norm_backward(val(x), val(gamma), g);
                emit(*x, needs(x).then_some(dx));
                emit(*gamma, needs(gamma).then_some(dgamma));
                emit(*beta, needs(beta).then_some(dbeta));
            }
            Op::Gelu { x } => emit(*x, Some(pointwise::gelu_backward(val(x), g))),
            Op::Relu { x } => emit(*x, Some(pointwise::relu_backward(val(x), g))),
            Op::L2Normalize { x } => emit(*x, Some(reduce::l2_normalize_backward(val(x), out, g))),
            Op::AbsSum { x } => emit(*x, Some(reduce::abs_sum_backward(val(x), g[0]))),
            Op::Log { x } => emit(*x, Some(val(x).data().iter().zip(g).map(|(v, d)| d / v).collect())),
            Op::Exp { x } => emit(*x, Some(out.data().iter().zip(g).map(|(y, d)| d * y).collect())),
            Op::Upsample2x { x } => emit(*x, Some(layout::upsample2x_backward(val(x).shape(), g))),
            Op::PatchMerge { x } => emit(*x, Some(layout::patch_merge_backward(val(x).shape(), g))),
        }
        Ok(grads)
    }
}
