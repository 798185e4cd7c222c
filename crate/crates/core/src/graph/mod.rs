//! Recorded-operation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and a record of
//! its inputs. `backward` walks the record in reverse execution order and
//! accumulates gradients by summing over all paths.

mod linalg;
mod losses;
mod pointwise;
mod reduce;
mod spatial;
mod window;

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub(crate) use linalg::gemm;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Model component a node was recorded under; used for ablation audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Scope {
    Input,
    Backbone,
    Ssea,
    Dssa,
    Head,
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Relu,
    EluPlusOne,
    Tanh,
    Exp,
    Log,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    Reshape(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    DivRows(Var, Var),
    Softmax(Var),
    Sum { x: Var, axes: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    SliceLast { x: Var, start: usize },
    AvgPool2(Var),
    Upsample { x: Var, factor: usize },
    Conv2d { x: Var, k: Var, stride: (usize, usize), pad: (usize, usize) },
    BilinearSample { x: Var, coords: Var },
    GatherRows { x: Var, idx: Vec<usize> },
    WindowDot { q: Var, k: Var },
    NormalizeLast { w: Var, floor: f64 },
    WindowCombine { w: Var, v: Var },
    L2NormalizeRows(Var),
    SegmentMean { x: Var, seg: Vec<Option<usize>>, counts: Vec<usize> },
    NllPick { probs: Var, targets: Vec<Option<usize>>, floor: f64, denom: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    scope: Scope,
}

/// The tape: nodes in execution order.
pub struct Graph {
    nodes: Vec<Node>,
    scope: Scope,
    n_params: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: Scope::Input,
            n_params: 0,
        }
    }

    /// A graph whose first nodes are the store's parameters, in id order.
    pub fn with_params(store: &ParamStore) -> Self {
        let mut g = Self::new();
        for t in store.tensors() {
            g.leaf(t.clone(), true);
        }
        g.n_params = store.len();
        g
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.n_params, "parameter {} not bound", id.0);
        Var(id.0)
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
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

    /// Sets the scope for subsequently recorded nodes and returns the old one.
    pub fn set_scope(&mut self, scope: Scope) -> Scope {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of non-leaf nodes recorded under each scope.
    pub fn scope_counts(&self) -> BTreeMap<Scope, usize> {
        let mut m = BTreeMap::new();
        for n in &self.nodes {
            if !matches!(n.op, Op::Leaf) {
                *m.entry(n.scope).or_insert(0) += 1;
            }
        }
        m
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            scope: self.scope,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut order = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            order.push(Var(i));
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients {
            grads,
            order,
            n_params: self.n_params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => self.bw_add(*a, *b, g, grads, 1.0),
            Op::Sub(a, b) => self.bw_add(*a, *b, g, grads, -1.0),
            Op::Mul(a, b) => self.bw_mul(*a, *b, g, grads),
            Op::Unary(u, x) => self.bw_unary(*u, *x, out, g, grads),
            Op::Reshape(x) => {
                let t = g.clone().reshape(self.shape(*x)).expect("reshape grad");
                self.accumulate(grads, *x, t)
            }
            Op::MatMul(a, b) => self.bw_matmul(*a, *b, g, grads),
            Op::Transpose(x) => self.bw_transpose(*x, g, grads),
            Op::AddRowBias(x, b) => self.bw_add_row_bias(*x, *b, g, grads),
            Op::DivRows(x, d) => self.bw_div_rows(*x, *d, g, grads),
            Op::Softmax(x) => self.bw_softmax(*x, out, g, grads),
            Op::Sum { x, axes } => self.bw_sum(*x, axes, g, grads),
            Op::Concat { xs, axis } => self.bw_concat(xs, *axis, g, grads),
            Op::SliceLast { x, start } => self.bw_slice_last(*x, *start, g, grads),
            Op::AvgPool2(x) => self.bw_avgpool2(*x, g, grads),
            Op::Upsample { x, factor } => self.bw_upsample(*x, *factor, g, grads),
            Op::Conv2d { x, k, stride, pad } => self.bw_conv2d(*x, *k, *stride, *pad, g, grads),
            Op::BilinearSample { x, coords } => self.bw_bilinear(*x, *coords, g, grads),
            Op::GatherRows { x, idx } => self.bw_gather_rows(*x, idx, g, grads),
            Op::WindowDot { q, k } => self.bw_window_dot(*q, *k, g, grads),
            Op::NormalizeLast { w, floor } => self.bw_normalize_last(*w, *floor, out, g, grads),
            Op::WindowCombine { w, v } => self.bw_window_combine(*w, *v, g, grads),
            Op::L2NormalizeRows(x) => self.bw_l2_normalize_rows(*x, out, g, grads),
            Op::SegmentMean { x, seg, counts } => self.bw_segment_mean(*x, seg, counts, g, grads),
            Op::NllPick {
                probs,
                targets,
                floor,
                denom,
            } => self.bw_nll_pick(*probs, targets, *floor, *denom, g, grads),
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    order: Vec<Var>,
    n_params: usize,
}

impl Gradients {
    /// Gradient of a leaf; `None` when no path reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros shaped like `like` when unreached.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    /// Non-leaf nodes in the order their backward rules ran.
    pub fn visit_order(&self) -> &[Var] {
        &self.order
    }

    /// Parameter gradients in id order; unreached parameters are `None`.
    pub fn param_grads(&self) -> impl Iterator<Item = Option<&Tensor>> {
        self.grads[..self.n_params].iter().map(|g| g.as_ref())
    }
}
