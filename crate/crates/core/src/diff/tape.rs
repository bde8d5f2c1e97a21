//! Define-by-run reverse-mode tape.
//!
//! Every operation evaluates eagerly and appends one node holding its value
//! and the operand handles needed by its local gradient rule. Nodes are
//! append-only, so operands always precede their consumers and a single
//! reverse sweep visits the graph in topological order.

use std::cell::RefCell;
use std::sync::Arc;

use super::array::{self, Array};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Square(Var),
    MatMul(Var, Var),
    SumAll(Var),
    SumAxis(Var, usize),
    BroadcastTo(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    RowwiseMatvec(Var, Var),
    TrilMatvec(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    untracked: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that evaluates but keeps no gradient information.
    pub fn untracked() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            untracked: true,
        }
    }

    pub fn is_tracking(&self) -> bool {
        !self.untracked
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let (op, requires_grad) = if self.untracked {
            (Op::Leaf, false)
        } else {
            (op, requires_grad)
        };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A value gradients flow into.
    pub fn leaf(&self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A value treated as fixed during backpropagation.
    pub fn constant(&self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    pub fn value(&self, v: Var) -> Array {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn item(&self, v: Var) -> f64 {
        self.with_value(v, |a| a.data()[0])
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.with_value(v, |a| a.shape().to_vec())
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            array::broadcast_binary(name, &nodes[a.0].value, &nodes[b.0].value, f)?
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.with_value(a, |x| x.map(f));
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn offset(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if let Some(bad) = self.with_value(a, |x| x.data().iter().copied().find(|&v| !(v > 0.0))) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sqrt(&self, a: Var) -> Result<Var> {
        if let Some(bad) = self.with_value(a, |x| x.data().iter().copied().find(|&v| !(v > 0.0))) {
            return Err(Error::domain("sqrt", format!("non-positive input {bad}")));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
                return Err(Error::Shape {
                    op: "matmul",
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                });
            }
            let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
            Array::new(vec![n, m], array::matmul_raw(x.data(), y.data(), n, k, m))?
        };
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn sum(&self, a: Var) -> Var {
        let value = Array::scalar(self.with_value(a, |x| x.sum()));
        let rg = self.needs(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.with_value(a, |x| x.len()).max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let value = self.with_value(a, |x| {
            if axis >= x.rank() {
                Err(Error::Shape {
                    op: "sum_axis",
                    lhs: x.shape().to_vec(),
                    rhs: vec![axis],
                })
            } else {
                Ok(array::sum_axis(x, axis))
            }
        })?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var> {
        let n = self.with_value(a, |x| x.shape().get(axis).copied().unwrap_or(1));
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n.max(1) as f64))
    }

    pub fn broadcast_to(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.with_value(a, |x| array::broadcast_to(x, shape))?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::BroadcastTo(a), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.with_value(a, |x| x.clone().reshape(shape.to_vec()))?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let arrays: Vec<&Array> = parts.iter().map(|v| &nodes[v.0].value).collect();
            array::concat(&arrays, axis)?
        };
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Columns `[start, end)` of the last axis.
    pub fn narrow_last(&self, a: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.with_value(a, |x| {
            let axis = x.rank().checked_sub(1);
            match axis {
                Some(ax) if start <= end && end <= x.shape()[ax] => {
                    Ok(array::narrow(x, ax, start, end))
                }
                _ => Err(Error::Shape {
                    op: "narrow",
                    lhs: x.shape().to_vec(),
                    rhs: vec![start, end],
                }),
            }
        })?;
        let axis = self.with_value(a, |x| x.rank() - 1);
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Narrow(a, axis, start), rg))
    }

    /// Selects first-axis slices; the gradient scatter-adds back.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.with_value(a, |x| x.gather_rows(indices))?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::GatherRows(a, indices.into()), rg))
    }

    /// Sums rows of `a` into `rows` output rows at `indices`.
    pub fn scatter_add_rows(&self, a: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let value = self.with_value(a, |x| x.scatter_add_rows(indices, rows))?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::ScatterAddRows(a, indices.into()), rg))
    }

    /// Per-row matrix-vector product: `x: [R, in]`, `w: [R, in * out]`
    /// holding one row-major `in x out` matrix per row, result `[R, out]`.
    pub fn rowwise_matvec(&self, x: Var, w: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xa, wa) = (&nodes[x.0].value, &nodes[w.0].value);
            let bad = || Error::Shape {
                op: "rowwise_matvec",
                lhs: xa.shape().to_vec(),
                rhs: wa.shape().to_vec(),
            };
            if xa.rank() != 2 || wa.rank() != 2 || xa.shape()[0] != wa.shape()[0] {
                return Err(bad());
            }
            let (r, i) = (xa.shape()[0], xa.shape()[1]);
            let wl = wa.shape()[1];
            if i == 0 {
                return Err(bad());
            }
            if wl % i != 0 {
                return Err(bad());
            }
            let o = wl / i;
            let mut out = vec![0.0; r * o];
            for row in 0..r {
                let xr = xa.row(row);
                let wr = wa.row(row);
                let orow = &mut out[row * o..(row + 1) * o];
                for (p, &xv) in xr.iter().enumerate() {
                    for (y, &wv) in orow.iter_mut().zip(&wr[p * o..(p + 1) * o]) {
                        *y += xv * wv;
                    }
                }
            }
            Array::new(vec![r, o], out)?
        };
        let rg = self.needs(&[x, w]);
        Ok(self.push(value, Op::RowwiseMatvec(x, w), rg))
    }

    /// Strictly-lower-triangular per-row product. `off: [R, D(D-1)/2]` packs
    /// entry `(k, j)`, `j < k`, at column `k(k-1)/2 + j`; `u: [R, D]`.
    /// Returns `y[r, k] = sum_{j<k} off[r, (k,j)] * u[r, j]`.
    pub fn tril_matvec(&self, off: Var, u: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (oa, ua) = (&nodes[off.0].value, &nodes[u.0].value);
            let ok = oa.rank() == 2
                && ua.rank() == 2
                && oa.shape()[0] == ua.shape()[0]
                && oa.shape()[1] == tril_len(ua.shape()[1]);
            if !ok {
                return Err(Error::Shape {
                    op: "tril_matvec",
                    lhs: oa.shape().to_vec(),
                    rhs: ua.shape().to_vec(),
                });
            }
            let (r, d) = (ua.shape()[0], ua.shape()[1]);
            let mut out = vec![0.0; r * d];
            for row in 0..r {
                let (o, x) = (oa.row(row), ua.row(row));
                for k in 1..d {
                    let base = k * (k - 1) / 2;
                    out[row * d + k] = (0..k).map(|j| o[base + j] * x[j]).sum();
                }
            }
            Array::new(vec![r, d], out)?
        };
        let rg = self.needs(&[off, u]);
        Ok(self.push(value, Op::TrilMatvec(off, u), rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.untracked {
            return Err(Error::contract("backward on an untracked tape"));
        }
        let nodes = self.nodes.borrow();
        let out = &nodes
            .get(output.0)
            .ok_or_else(|| Error::contract("backward output is not on this tape"))?
            .value;
        if out.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &nodes[idx];
            // Leaf gradients stay in place; intermediate ones are consumed.
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &nodes[v.0].value;
            let mut contribs: Vec<(Var, Array)> = Vec::new();
            let mut acc = |v: Var, contrib: Array| {
                if nodes[v.0].requires_grad {
                    contribs.push((v, contrib));
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(*a, array::sum_to_shape(&g, val(*a).shape()));
                    acc(*b, array::sum_to_shape(&g, val(*b).shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, array::sum_to_shape(&g, val(*a).shape()));
                    acc(*b, array::sum_to_shape(&g.map(|x| -x), val(*b).shape()));
                }
                Op::Mul(a, b) => {
                    let ga = array::broadcast_binary("mul", &g, val(*b), |x, y| x * y)?;
                    let gb = array::broadcast_binary("mul", &g, val(*a), |x, y| x * y)?;
                    acc(*a, array::sum_to_shape(&ga, val(*a).shape()));
                    acc(*b, array::sum_to_shape(&gb, val(*b).shape()));
                }
                Op::Div(a, b) => {
                    let ga = array::broadcast_binary("div", &g, val(*b), |x, y| x / y)?;
                    // d(a/b)/db = -(a/b)/b = -out/b
                    let t = array::broadcast_binary("div", &node.value, val(*b), |x, y| x / y)?;
                    let gb = t.zip_map(&g, |x, y| -x * y);
                    acc(*a, array::sum_to_shape(&ga, val(*a).shape()));
                    acc(*b, array::sum_to_shape(&gb, val(*b).shape()));
                }
                Op::Neg(a) => acc(*a, g.map(|x| -x)),
                Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
                Op::Offset(a) => acc(*a, g),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)),
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Softplus(a) => acc(*a, g.zip_map(val(*a), |x, y| x * sigmoid(y))),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Sqrt(a) => acc(*a, g.zip_map(&node.value, |x, y| 0.5 * x / y)),
                Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
                Op::MatMul(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                    let yt = y.transpose2();
                    let ga = array::matmul_raw(g.data(), yt.data(), n, m, k);
                    let xt = x.transpose2();
                    let gb = array::matmul_raw(xt.data(), g.data(), k, n, m);
                    acc(*a, Array::new(vec![n, k], ga)?);
                    acc(*b, Array::new(vec![k, m], gb)?);
                }
                Op::SumAll(a) => acc(*a, Array::full(val(*a).shape(), g.item())),
                Op::SumAxis(a, axis) => {
                    let n = val(*a).shape()[*axis];
                    acc(*a, array::expand_axis(&g, *axis, n));
                }
                Op::BroadcastTo(a) => acc(*a, array::sum_to_shape(&g, val(*a).shape())),
                Op::Reshape(a) => acc(*a, g.reshape(val(*a).shape().to_vec())?),
                Op::Concat(parts, axis) => {
                    let mut start = 0;
                    for p in parts {
                        let len = val(*p).shape()[*axis];
                        acc(*p, array::narrow(&g, *axis, start, start + len));
                        start += len;
                    }
                }
                Op::Narrow(a, axis, start) => {
                    acc(*a, array::pad_axis(&g, val(*a).shape(), *axis, *start));
                }
                Op::GatherRows(a, idxs) => {
                    acc(*a, g.scatter_add_rows(idxs, val(*a).rows())?);
                }
                Op::ScatterAddRows(a, idxs) => acc(*a, g.gather_rows(idxs)?),
                Op::RowwiseMatvec(x, w) => {
                    let (xa, wa) = (val(*x), val(*w));
                    let (r, i) = (xa.shape()[0], xa.shape()[1]);
                    let o = wa.shape()[1] / i;
                    let mut gx = Array::zeros(xa.shape());
                    let mut gw = Array::zeros(wa.shape());
                    for row in 0..r {
                        let grow = g.row(row);
                        let xr = xa.row(row);
                        let wr = wa.row(row);
                        let gxr = gx.row_mut(row);
                        for (p, gxv) in gxr.iter_mut().enumerate() {
                            *gxv = wr[p * o..(p + 1) * o]
                                .iter()
                                .zip(grow)
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                        let gwr = gw.row_mut(row);
                        for (p, &xv) in xr.iter().enumerate() {
                            for (gwv, &gv) in gwr[p * o..(p + 1) * o].iter_mut().zip(grow) {
                                *gwv = xv * gv;
                            }
                        }
                    }
                    acc(*x, gx);
                    acc(*w, gw);
                }
                Op::TrilMatvec(off, u) => {
                    let (oa, ua) = (val(*off), val(*u));
                    let d = ua.shape()[1];
                    let mut goff = Array::zeros(oa.shape());
                    let mut gu = Array::zeros(ua.shape());
                    for row in 0..ua.shape()[0] {
                        let grow = g.row(row).to_vec();
                        let orow = oa.row(row).to_vec();
                        let urow = ua.row(row).to_vec();
                        let go = goff.row_mut(row);
                        for k in 1..d {
                            let base = k * (k - 1) / 2;
                            for j in 0..k {
                                go[base + j] = urow[j] * grow[k];
                            }
                        }
                        let gur = gu.row_mut(row);
                        for k in 1..d {
                            let base = k * (k - 1) / 2;
                            for j in 0..k {
                                gur[j] += orow[base + j] * grow[k];
                            }
                        }
                    }
                    acc(*off, goff);
                    acc(*u, gu);
                }
            }
            for (v, c) in contribs {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        let shapes = nodes[..=output.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Number of strictly-lower entries of a `d x d` matrix.
pub fn tril_len(d: usize) -> usize {
    d * d.saturating_sub(1) / 2
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the output with respect to the leaf `v`; exact zeros when
    /// `v` is not on a path to the output. Intermediate nodes are not kept.
    pub fn wrt(&self, v: Var) -> Array {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => match self.shapes.get(v.0) {
                Some(s) => Array::zeros(s),
                None => Array::scalar(0.0),
            },
        }
    }

    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
