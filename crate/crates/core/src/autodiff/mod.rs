//! Define-by-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation on a [`Var`]
//! evaluates eagerly and appends one node, so append order is a valid
//! topological order and [`Tape::backward`] simply walks the nodes in
//! reverse. Gradients accumulate additively wherever a value fans out.

mod check;
pub(crate) mod kernels;
mod ops;

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;

pub use check::{grad_check, grad_check_many, numeric_gradient, numeric_gradient_many};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::warp;
use kernels::PatchGeometry;

pub type NodeId = usize;

/// Lower/upper clamp applied to every `exp` input.
pub const EXP_CLAMP: f64 = 40.0;

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    Reshape(NodeId),
    Narrow {
        src: NodeId,
        axis: usize,
        start: usize,
    },
    Concat {
        srcs: Vec<NodeId>,
        axis: usize,
    },
    LayerNorm {
        src: NodeId,
        eps: f64,
    },
    Norm(NodeId),
    Patches {
        src: NodeId,
        kernel: usize,
        stride: usize,
    },
    GridSample {
        image: NodeId,
        grid: NodeId,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(_) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::Reshape(_) => "reshape",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Norm(_) => "norm",
            Op::Patches { .. } => "patches",
            Op::GridSample { .. } => "grid_sample",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, &*self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// First node (in evaluation order) holding a NaN or infinity, with its
    /// op name.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.nodes
            .borrow()
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse pass from a scalar `root`.
    ///
    /// Returns one gradient per trainable leaf. A root that does not depend on
    /// any trainable leaf yields an empty map.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(root.tape, self) {
            return Err(Error::Backward("root belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if !root_node.value.shape().is_empty() {
            return Err(Error::Backward(format!(
                "root must be a scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        if !root_node.requires_grad {
            return Ok(Gradients::default());
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![1.0]);
        let mut out = BTreeMap::new();

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                out.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
        }

        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { map: out })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    pub fn backward(&self) -> Result<Gradients> {
        self.tape.backward(*self)
    }
}

/// Gradients of a scalar root with respect to trainable leaves.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.map.get(&var.id)
    }

    pub fn by_id(&self, id: NodeId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.map.iter()
    }
}

#[doc(hidden)]
pub mod fault {
    //! Deliberate defects for mutation-testing the verification suites.
    use std::cell::Cell;

    thread_local! {
        static TANH_SIGN: Cell<bool> = const { Cell::new(false) };
    }

    /// Flips the sign of the tanh backward rule on the current thread.
    pub fn set_tanh_backward_sign_flip(on: bool) {
        TANH_SIGN.with(|c| c.set(on));
    }

    pub(crate) fn tanh_sign() -> f64 {
        if TANH_SIGN.with(|c| c.get()) {
            -1.0
        } else {
            1.0
        }
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: NodeId,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

/// Scatter-add `g` (over the broadcast output) into an operand of `n` values.
fn reduce_into(dst: &mut [f64], g: &[f64], local: impl Fn(usize) -> f64) {
    let n = dst.len();
    if n == g.len() {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += g[i] * local(i);
        }
    } else {
        for (i, &gv) in g.iter().enumerate() {
            dst[i % n] += gv * local(i);
        }
    }
}

fn propagate(nodes: &[Node], id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = node.value.data();
    let val = |i: NodeId| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |d| reduce_into(d, g, |_| 1.0));
            accumulate(nodes, grads, *b, |d| reduce_into(d, g, |_| 1.0));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |d| reduce_into(d, g, |_| 1.0));
            accumulate(nodes, grads, *b, |d| reduce_into(d, g, |_| -1.0));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (na, nb) = (av.len(), bv.len());
            accumulate(nodes, grads, *a, |d| reduce_into(d, g, |i| bv[i % nb]));
            accumulate(nodes, grads, *b, |d| reduce_into(d, g, |i| av[i % na]));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (na, nb) = (av.len(), bv.len());
            accumulate(nodes, grads, *a, |d| reduce_into(d, g, |i| 1.0 / bv[i % nb]));
            accumulate(nodes, grads, *b, |d| {
                reduce_into(d, g, |i| {
                    let bb = bv[i % nb];
                    -av[i % na] / (bb * bb)
                })
            });
        }
        Op::Neg(a) => accumulate(nodes, grads, *a, |d| reduce_into(d, g, |_| -1.0)),
        Op::Scale(a, c) => accumulate(nodes, grads, *a, |d| reduce_into(d, g, |_| *c)),
        Op::Offset(a) | Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |d| reduce_into(d, g, |_| 1.0))
        }
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, |d| kernels::matmul_nt_acc(d, g, bv, m, n, k));
            accumulate(nodes, grads, *b, |d| kernels::matmul_tn_acc(d, av, g, m, k, n));
        }
        Op::Transpose(a) => {
            let s = node.value.shape();
            let t = kernels::transpose(g, s[0], s[1]);
            accumulate(nodes, grads, *a, |d| reduce_into(d, &t, |_| 1.0));
        }
        Op::Tanh(a) => {
            let sign = fault::tanh_sign();
            accumulate(nodes, grads, *a, |d| {
                reduce_into(d, g, |i| sign * (1.0 - out[i] * out[i]))
            });
        }
        Op::Sigmoid(a) => {
            accumulate(nodes, grads, *a, |d| reduce_into(d, g, |i| out[i] * (1.0 - out[i])))
        }
        Op::Exp(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, |d| {
                reduce_into(d, g, |i| {
                    if x[i].abs() <= EXP_CLAMP {
                        out[i]
                    } else {
                        0.0
                    }
                })
            });
        }
        Op::Log(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, |d| reduce_into(d, g, |i| 1.0 / x[i]));
        }
        Op::Sin(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, |d| reduce_into(d, g, |i| x[i].cos()));
        }
        Op::Cos(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, |d| reduce_into(d, g, |i| -x[i].sin()));
        }
        Op::Gelu(a) => {
            let x = val(*a);
            accumulate(nodes, grads, *a, |d| reduce_into(d, g, |i| kernels::gelu_grad(x[i])));
        }
        Op::Softmax(a) => {
            let cols = last_dim(&node.value);
            accumulate(nodes, grads, *a, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(out.chunks_exact(cols))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let cols = last_dim(&node.value);
            accumulate(nodes, grads, *a, |d| {
                for ((drow, grow), lrow) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(out.chunks_exact(cols))
                {
                    let total: f64 = grow.iter().sum();
                    for j in 0..cols {
                        drow[j] += grow[j] - lrow[j].exp() * total;
                    }
                }
            });
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|v| *v += g[0])),
        Op::Mean(a) => {
            let n = nodes[*a].value.numel() as f64;
            accumulate(nodes, grads, *a, |d| d.iter_mut().for_each(|v| *v += g[0] / n));
        }
        Op::MeanRows(a) => {
            let rows = nodes[*a].value.shape()[0] as f64;
            let n = g.len();
            accumulate(nodes, grads, *a, |d| {
                for (i, dv) in d.iter_mut().enumerate() {
                    *dv += g[i % n] / rows;
                }
            });
        }
        Op::Narrow { src, axis, start } => {
            let s_in = nodes[*src].value.shape();
            let (outer, len_in, inner) = axis_split(s_in, *axis);
            let len_out = node.value.shape()[*axis];
            accumulate(nodes, grads, *src, |d| {
                for o in 0..outer {
                    for j in 0..len_out {
                        let dst = (o * len_in + start + j) * inner;
                        let srcg = (o * len_out + j) * inner;
                        for k in 0..inner {
                            d[dst + k] += g[srcg + k];
                        }
                    }
                }
            });
        }
        Op::Concat { srcs, axis } => {
            let s_out = node.value.shape();
            let (outer, len_out, inner) = axis_split(s_out, *axis);
            let mut offset = 0;
            for &src in srcs {
                let len_in = nodes[src].value.shape()[*axis];
                accumulate(nodes, grads, src, |d| {
                    for o in 0..outer {
                        let dst = o * len_in * inner;
                        let from = (o * len_out + offset) * inner;
                        for k in 0..len_in * inner {
                            d[dst + k] += g[from + k];
                        }
                    }
                });
                offset += len_in;
            }
        }
        Op::LayerNorm { src, eps } => {
            let x = val(*src);
            let cols = last_dim(&node.value);
            accumulate(nodes, grads, *src, |d| {
                for (((drow, grow), yrow), xrow) in d
                    .chunks_exact_mut(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(out.chunks_exact(cols))
                    .zip(x.chunks_exact(cols))
                {
                    let n = cols as f64;
                    let mean = xrow.iter().sum::<f64>() / n;
                    let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let g_mean = grow.iter().sum::<f64>() / n;
                    let gy_mean = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..cols {
                        drow[j] += inv_std * (grow[j] - g_mean - yrow[j] * gy_mean);
                    }
                }
            });
        }
        Op::Norm(a) => {
            let x = val(*a);
            let norm = out[0];
            accumulate(nodes, grads, *a, |d| {
                if norm > 0.0 {
                    for (dv, xv) in d.iter_mut().zip(x) {
                        *dv += g[0] * xv / norm;
                    }
                }
            });
        }
        Op::Patches {
            src,
            kernel,
            stride,
        } => {
            let s = nodes[*src].value.shape();
            let geo = PatchGeometry {
                channels: s[0],
                height: s[1],
                width: s[2],
                kernel: *kernel,
                stride: *stride,
            };
            accumulate(nodes, grads, *src, |d| geo.for_each(|o, i| d[i] += g[o]));
        }
        Op::GridSample { image, grid } => {
            let img = &nodes[*image].value;
            let grd = &nodes[*grid].value;
            let want_img = nodes[*image].requires_grad;
            let want_grid = nodes[*grid].requires_grad;
            let (gi, gg) = warp::sample_backward(img, grd, g, want_img, want_grid);
            if let Some(gi) = gi {
                accumulate(nodes, grads, *image, |d| reduce_into(d, &gi, |_| 1.0));
            }
            if let Some(gg) = gg {
                accumulate(nodes, grads, *grid, |d| reduce_into(d, &gg, |_| 1.0));
            }
        }
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().unwrap_or(&1)
}

/// `(outer, axis_len, inner)` for a row-major shape split at `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
