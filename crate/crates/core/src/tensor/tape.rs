use std::cell::{Cell, RefCell};
use std::fmt;

use super::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Elementwise single-input operations.
///
/// `Relu` uses the subgradient 0 at exactly 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Negate,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Tanh,
    Square,
    /// `log(1 + e^x)`, evaluated without overflow.
    Softplus,
    /// `log σ(x) = -softplus(-x)`.
    LogSigmoid,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(UnaryOp, usize),
    Binary(BinaryOp, usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reduce { kind: ReduceOp, input: usize, axis: Option<usize>, argmax: Vec<usize> },
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    SelectCols(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operation's operands have
/// smaller indices than the operation itself and a single reverse sweep visits
/// each node once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("backward_done", &self.backward_done.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Results that nothing upstream differentiates are stored as plain constants.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node { value, requires_grad, op });
        Var { tape: self, id }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Clears accumulated gradients so `backward` may run again.
    pub fn reset_grads(&self) {
        self.grads.borrow_mut().clear();
        self.backward_done.set(false);
    }

    /// Propagates `∂loss/∂node` to every node that requires a gradient.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        if self.backward_done.get() {
            return Err(Error::Contract("backward already ran on this tape; call reset_grads first".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", root.value.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        self.backward_done.set(true);
        Ok(())
    }

    fn unary(&self, kind: UnaryOp, x: usize) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let input = &nodes[x].value;
            if kind == UnaryOp::Log {
                if let Some((index, &value)) = input.data().iter().enumerate().find(|(_, &v)| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain { op: "log", index, value });
                }
            }
            let f: fn(f64, f64) -> f64 = match kind {
                UnaryOp::Negate => |v, _| -v,
                UnaryOp::Exp => |v, _| v.exp(),
                UnaryOp::Log => |v, _| v.ln(),
                UnaryOp::Relu => |v, _| if v > 0.0 { v } else { 0.0 },
                UnaryOp::Sigmoid => |v, _| sigmoid(v),
                UnaryOp::Tanh => |v, _| v.tanh(),
                UnaryOp::Square => |v, _| v * v,
                UnaryOp::Softplus => |v, _| softplus(v),
                UnaryOp::LogSigmoid => |v, _| -softplus(-v),
                UnaryOp::Scale(_) => |v, c| v * c,
            };
            let c = if let UnaryOp::Scale(c) = kind { c } else { 0.0 };
            (input.map(|v| f(v, c)), nodes[x].requires_grad)
        };
        Ok(self.push(value, rg, Op::Unary(kind, x)))
    }

    fn binary(&self, kind: BinaryOp, a: usize, b: usize) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let plan = Broadcast::plan(av.shape(), bv.shape()).ok_or_else(|| {
                Error::shape(binary_name(kind), format!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape()))
            })?;
            if kind == BinaryOp::Div {
                if let Some(index) = bv.data().iter().position(|&v| v == 0.0) {
                    return Err(Error::Domain { op: "div", index, value: 0.0 });
                }
            }
            let (ad, bd) = (av.data(), bv.data());
            let f: fn(f64, f64) -> f64 = match kind {
                BinaryOp::Add => |x, y| x + y,
                BinaryOp::Sub => |x, y| x - y,
                BinaryOp::Mul => |x, y| x * y,
                BinaryOp::Div => |x, y| x / y,
            };
            let data = (0..plan.len()).map(|i| f(ad[plan.lhs(i)], bd[plan.rhs(i)])).collect();
            (Tensor::new(plan.shape.clone(), data)?, nodes[a].requires_grad || nodes[b].requires_grad)
        };
        Ok(self.push(value, rg, Op::Binary(kind, a, b)))
    }

    fn matmul(&self, a: usize, b: usize) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
                return Err(Error::shape("matmul", format!("cannot multiply {:?} by {:?}", av.shape(), bv.shape())));
            }
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut out = vec![0.0; m * n];
            gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
            (Tensor::new(vec![m, n], out)?, nodes[a].requires_grad || nodes[b].requires_grad)
        };
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    fn transpose(&self, x: usize) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x].value.transpose()?, nodes[x].requires_grad)
        };
        Ok(self.push(value, rg, Op::Transpose(x)))
    }

    fn reduce(&self, kind: ReduceOp, x: usize, axis: Option<usize>) -> Result<Var<'_>> {
        let (value, argmax, rg) = {
            let nodes = self.nodes.borrow();
            let input = &nodes[x].value;
            let (outer, n, inner, out_shape) = match axis {
                None => (1, input.len(), 1, Vec::new()),
                Some(ax) => {
                    if ax >= input.rank() {
                        return Err(Error::shape(
                            reduce_name(kind),
                            format!("axis {ax} out of range for shape {:?}", input.shape()),
                        ));
                    }
                    let (o, n, i) = axis_split(input.shape(), ax);
                    let mut s = input.shape().to_vec();
                    s.remove(ax);
                    (o, n, i, s)
                }
            };
            let d = input.data();
            let mut out = vec![0.0; outer * inner];
            let mut argmax = Vec::new();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |p: usize| d[(o * n + p) * inner + i];
                    out[o * inner + i] = match kind {
                        ReduceOp::Sum => (0..n).map(at).sum(),
                        ReduceOp::Mean => (0..n).map(at).sum::<f64>() / n as f64,
                        ReduceOp::Max => {
                            let mut best = 0;
                            for p in 1..n {
                                if at(p) > at(best) {
                                    best = p;
                                }
                            }
                            argmax.push(best);
                            at(best)
                        }
                    };
                }
            }
            (Tensor::new(out_shape, out)?, argmax, nodes[x].requires_grad)
        };
        Ok(self.push(value, rg, Op::Reduce { kind, input: x, axis, argmax }))
    }

    fn softmax_like(&self, x: usize, axis: usize, log: bool) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let input = &nodes[x].value;
            let name = if log { "log_softmax" } else { "softmax" };
            if axis >= input.rank() {
                return Err(Error::shape(name, format!("axis {axis} out of range for {:?}", input.shape())));
            }
            if let Some(index) = input.data().iter().position(|v| v.is_nan()) {
                return Err(Error::Domain { op: name, index, value: f64::NAN });
            }
            let (outer, n, inner) = axis_split(input.shape(), axis);
            let d = input.data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |p: usize| (o * n + p) * inner + i;
                    let max = (0..n).map(|p| d[idx(p)]).fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = (0..n).map(|p| (d[idx(p)] - max).exp()).sum();
                    for p in 0..n {
                        let shifted = d[idx(p)] - max;
                        out[idx(p)] = if log { shifted - total.ln() } else { shifted.exp() / total };
                    }
                }
            }
            (Tensor::new(input.shape().to_vec(), out)?, nodes[x].requires_grad)
        };
        let op = if log { Op::LogSoftmax(x, axis) } else { Op::Softmax(x, axis) };
        Ok(self.push(value, rg, op))
    }

    fn select_cols(&self, x: usize, cols: &[usize]) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x].value.select_cols(cols)?, nodes[x].requires_grad)
        };
        Ok(self.push(value, rg, Op::SelectCols(x, cols.to_vec())))
    }

    fn gather_rows(&self, x: usize, rows: &[usize]) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x].value.select_rows(rows)?, nodes[x].requires_grad)
        };
        Ok(self.push(value, rg, Op::GatherRows(x, rows.to_vec())))
    }

    fn reshape(&self, x: usize, shape: &[usize]) -> Result<Var<'_>> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[x].value.reshape(shape)?, nodes[x].requires_grad)
        };
        Ok(self.push(value, rg, Op::Reshape(x)))
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Unary(kind, x) => {
            let x = *x;
            if !nodes[x].requires_grad {
                return;
            }
            let xv = nodes[x].value.data();
            let acc = slot(grads, x, xv.len());
            for i in 0..g.len() {
                let d = match kind {
                    UnaryOp::Negate => -1.0,
                    UnaryOp::Exp => y[i],
                    UnaryOp::Log => 1.0 / xv[i],
                    UnaryOp::Relu => {
                        if xv[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                    UnaryOp::Tanh => 1.0 - y[i] * y[i],
                    UnaryOp::Square => 2.0 * xv[i],
                    UnaryOp::Softplus => sigmoid(xv[i]),
                    UnaryOp::LogSigmoid => sigmoid(-xv[i]),
                    UnaryOp::Scale(c) => *c,
                };
                acc[i] += g[i] * d;
            }
        }
        Op::Binary(kind, a, b) => {
            let (a, b) = (*a, *b);
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let plan = Broadcast::plan(av.shape(), bv.shape()).expect("shapes checked in forward");
            let (ad, bd) = (av.data(), bv.data());
            if nodes[a].requires_grad {
                let acc = slot(grads, a, ad.len());
                for i in 0..g.len() {
                    let (ia, ib) = (plan.lhs(i), plan.rhs(i));
                    let d = match kind {
                        BinaryOp::Add | BinaryOp::Sub => 1.0,
                        BinaryOp::Mul => bd[ib],
                        BinaryOp::Div => 1.0 / bd[ib],
                    };
                    acc[ia] += g[i] * d;
                }
            }
            if nodes[b].requires_grad {
                let acc = slot(grads, b, bd.len());
                for i in 0..g.len() {
                    let (ia, ib) = (plan.lhs(i), plan.rhs(i));
                    let d = match kind {
                        BinaryOp::Add => 1.0,
                        BinaryOp::Sub => -1.0,
                        BinaryOp::Mul => ad[ia],
                        BinaryOp::Div => -ad[ia] / (bd[ib] * bd[ib]),
                    };
                    acc[ib] += g[i] * d;
                }
            }
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[a].requires_grad {
                let acc = slot(grads, a, m * k);
                gemm_nt_acc(g, bv.data(), acc, m, k, n);
            }
            if nodes[b].requires_grad {
                let acc = slot(grads, b, k * n);
                gemm_tn_acc(av.data(), g, acc, m, k, n);
            }
        }
        Op::Transpose(x) => {
            let x = *x;
            let (r, c) = (nodes[x].value.shape()[0], nodes[x].value.shape()[1]);
            let acc = slot(grads, x, r * c);
            for i in 0..r {
                for j in 0..c {
                    acc[i * c + j] += g[j * r + i];
                }
            }
        }
        Op::Reduce { kind, input, axis, argmax } => {
            let x = *input;
            let shape = nodes[x].value.shape();
            let (outer, n, inner) = match axis {
                None => (1, nodes[x].value.len(), 1),
                Some(ax) => axis_split(shape, *ax),
            };
            let acc = slot(grads, x, outer * n * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let gi = g[o * inner + i];
                    match kind {
                        ReduceOp::Sum => (0..n).for_each(|p| acc[(o * n + p) * inner + i] += gi),
                        ReduceOp::Mean => (0..n).for_each(|p| acc[(o * n + p) * inner + i] += gi / n as f64),
                        ReduceOp::Max => {
                            let p = argmax[o * inner + i];
                            acc[(o * n + p) * inner + i] += gi;
                        }
                    }
                }
            }
        }
        Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
            let log = matches!(node.op, Op::LogSoftmax(..));
            let x = *x;
            let (outer, n, inner) = axis_split(nodes[x].value.shape(), *axis);
            let acc = slot(grads, x, y.len());
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |p: usize| (o * n + p) * inner + i;
                    if log {
                        let gsum: f64 = (0..n).map(|p| g[idx(p)]).sum();
                        for p in 0..n {
                            acc[idx(p)] += g[idx(p)] - y[idx(p)].exp() * gsum;
                        }
                    } else {
                        let dot: f64 = (0..n).map(|p| g[idx(p)] * y[idx(p)]).sum();
                        for p in 0..n {
                            acc[idx(p)] += y[idx(p)] * (g[idx(p)] - dot);
                        }
                    }
                }
            }
        }
        Op::SelectCols(x, cols) => {
            let x = *x;
            let c = nodes[x].value.cols();
            let rows = nodes[x].value.rows();
            let acc = slot(grads, x, rows * c);
            let k = cols.len();
            for r in 0..rows {
                for (q, &j) in cols.iter().enumerate() {
                    acc[r * c + j] += g[r * k + q];
                }
            }
        }
        Op::GatherRows(x, rows) => {
            let x = *x;
            let c = nodes[x].value.cols();
            let acc = slot(grads, x, nodes[x].value.len());
            for (q, &r) in rows.iter().enumerate() {
                for j in 0..c {
                    acc[r * c + j] += g[q * c + j];
                }
            }
        }
        Op::Reshape(x) => {
            let x = *x;
            let acc = slot(grads, x, g.len());
            for (a, &gv) in acc.iter_mut().zip(g) {
                *a += gv;
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn binary_name(kind: BinaryOp) -> &'static str {
    match kind {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
        BinaryOp::Div => "div",
    }
}

fn reduce_name(kind: ReduceOp) -> &'static str {
    match kind {
        ReduceOp::Sum => "sum",
        ReduceOp::Mean => "mean",
        ReduceOp::Max => "max",
    }
}

/// Index mapping for elementwise ops under trailing-axis broadcasting: shapes
/// are right-aligned and each axis must match or be 1 on one side.
struct Broadcast {
    shape: Vec<usize>,
    lhs_strides: Vec<usize>,
    rhs_strides: Vec<usize>,
    same: bool,
}

impl Broadcast {
    fn plan(a: &[usize], b: &[usize]) -> Option<Broadcast> {
        if a == b {
            return Some(Broadcast { shape: a.to_vec(), lhs_strides: Vec::new(), rhs_strides: Vec::new(), same: true });
        }
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            shape.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return None,
            });
        }
        let strides = |s: &[usize]| -> Vec<usize> {
            let mut st = vec![0; rank];
            let mut acc = 1;
            for ax in (0..rank).rev() {
                st[ax] = if s[ax] == 1 { 0 } else { acc };
                acc *= s[ax];
            }
            st
        };
        Some(Broadcast { lhs_strides: strides(&pa), rhs_strides: strides(&pb), shape, same: false })
    }

    fn len(&self) -> usize {
        self.shape.iter().product()
    }

    fn map(&self, mut flat: usize, strides: &[usize]) -> usize {
        let mut idx = 0;
        for ax in (0..self.shape.len()).rev() {
            let d = self.shape[ax];
            idx += (flat % d) * strides[ax];
            flat /= d;
        }
        idx
    }

    fn lhs(&self, i: usize) -> usize {
        if self.same {
            i
        } else {
            self.map(i, &self.lhs_strides)
        }
    }

    fn rhs(&self, i: usize) -> usize {
        if self.same {
            i
        } else {
            self.map(i, &self.rhs_strides)
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` against the stored value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(|t| t.item())
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// The accumulated gradient, if `backward` reached this node.
    pub fn grad(&self) -> Option<Tensor> {
        let grads = self.tape.grads.borrow();
        let g = grads.get(self.id)?.as_ref()?;
        let shape = self.shape();
        Tensor::new(shape, g.clone()).ok()
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn check_same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    pub fn unary(self, kind: UnaryOp) -> Result<Var<'t>> {
        self.tape.unary(kind, self.id)
    }

    pub fn binary(self, kind: BinaryOp, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other)?;
        self.tape.binary(kind, self.id, other.id)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Negate)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Log)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Relu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Square)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Softplus)
    }

    pub fn log_sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::LogSigmoid)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(UnaryOp::Scale(c))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(BinaryOp::Div, other)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let c = self.tape.constant(Tensor::scalar(c));
        self.add(c)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other)?;
        self.tape.matmul(self.id, other.id)
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.tape.transpose(self.id)
    }

    pub fn reduce(self, kind: ReduceOp, axis: Option<usize>) -> Result<Var<'t>> {
        self.tape.reduce(kind, self.id, axis)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Sum, None)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Mean, None)
    }

    pub fn max(self) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Max, None)
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Sum, Some(axis))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Mean, Some(axis))
    }

    pub fn max_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Max, Some(axis))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.tape.softmax_like(self.id, axis, false)
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.tape.softmax_like(self.id, axis, true)
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        let cols: Vec<usize> = (start..end).collect();
        self.select_cols(&cols)
    }

    pub fn select_cols(self, cols: &[usize]) -> Result<Var<'t>> {
        self.tape.select_cols(self.id, cols)
    }

    /// Row lookup with repetition allowed; gradients scatter-add back.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        self.tape.gather_rows(self.id, rows)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.reshape(self.id, shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn unary_values() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-3.0, 0.0, 2.0]));
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(x.sigmoid().unwrap().value().data()[1], 0.5);
        assert_eq!(x.square().unwrap().value().data(), &[9.0, 0.0, 4.0]);
    }

    #[test]
    fn log_of_nonpositive_names_index() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, -1.0]));
        match x.log() {
            Err(Error::Domain { op: "log", index: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn binary_and_broadcast() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
        let m = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let bias = tape.constant(t(&[3], &[10., 20., 30.]));
        assert_eq!(m.add(bias).unwrap().value().data(), &[11., 22., 33., 14., 25., 36.]);
        let col = tape.constant(t(&[2, 1], &[1., 0.]));
        assert_eq!(m.mul(col).unwrap().value().data(), &[1., 2., 3., 0., 0., 0.]);
        let zero = tape.constant(Tensor::scalar(0.0));
        assert!(m.mul(zero).unwrap().value().data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(t(&[2], &[1., 2.]));
        assert!(matches!(m.add(bad), Err(Error::Shape { .. })));
        assert!(matches!(m.div(zero), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let ones = tape.constant(t(&[2, 1], &[1., 1.]));
        assert_eq!(a.matmul(ones).unwrap().value().data(), &[3., 7.]);
        let x = tape.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let eye = tape.constant(Tensor::identity(3));
        assert_eq!(eye.matmul(x).unwrap().value(), x.value());
        assert!(matches!(a.matmul(x), Err(Error::Shape { .. })));
    }

    #[test]
    fn reductions() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1., 2., 3.]));
        assert_eq!(x.sum().unwrap().item().unwrap(), 6.0);
        let c = tape.constant(Tensor::full(&[2, 5], 1.5));
        assert_eq!(c.mean().unwrap().item().unwrap(), 1.5);
        let m = tape.constant(t(&[2, 3], &[1., 5., 3., 4., 2., 6.]));
        assert_eq!(m.sum_axis(1).unwrap().value().data(), &[9., 12.]);
        assert_eq!(m.max_axis(0).unwrap().value().data(), &[4., 5., 6.]);
        assert!(matches!(m.sum_axis(2), Err(Error::Shape { .. })));
    }

    #[test]
    fn max_routes_gradient_to_first_argmax() {
        let tape = Tape::new();
        let x = tape.param(t(&[4], &[1., 7., 7., 2.]));
        let m = x.max().unwrap();
        m.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn softmax_uniform_shift_and_overflow() {
        let tape = Tape::new();
        let z = tape.constant(t(&[3], &[0., 0., 0.]));
        for &p in z.softmax(0).unwrap().value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let v = [0.3, -1.2, 2.5];
        let a = tape.constant(t(&[3], &v)).softmax(0).unwrap().value();
        let shifted: Vec<f64> = v.iter().map(|x| x + 40.0).collect();
        let b = tape.constant(t(&[3], &shifted)).softmax(0).unwrap().value();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let big = tape.constant(t(&[2], &[1000.0, 0.0])).softmax(0).unwrap().value();
        // e^-1000 underflows to 0 in f64; the exact value is ~5e-435.
        assert!((big.data()[0] - 1.0).abs() < 1e-12);
        assert!(big.data()[1].abs() < 1e-12);
        let nan = tape.constant(t(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(nan.softmax(0), Err(Error::Domain { .. })));
    }

    #[test]
    fn scalar_derivatives() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        x.square().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().item().unwrap(), 6.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        x.sigmoid().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn backward_contracts() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(x.square().unwrap().backward(), Err(Error::Contract(_))));
        let loss = x.sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Contract(_))));
        tape.reset_grads();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1., 1.]);
    }

    #[test]
    fn constants_never_hold_grads() {
        let tape = Tape::new();
        let w = tape.param(t(&[2], &[1., 2.]));
        let c = tape.constant(t(&[2], &[3., 4.]));
        w.mul(c).unwrap().sum().unwrap().backward().unwrap();
        assert!(c.grad().is_none());
        assert_eq!(w.grad().unwrap().data(), &[3., 4.]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[-1., 0., 1.]));
        x.relu().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0., 0., 1.]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let tape = Tape::new();
        let p = tape.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let g = p.gather_rows(&[1, 1, 0]).unwrap();
        assert_eq!(g.value().data(), &[3., 4., 3., 4., 1., 2.]);
        g.sum().unwrap().backward().unwrap();
        assert_eq!(p.grad().unwrap().data(), &[1., 1., 2., 2.]);
    }
}
