//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]; the tape is
//! append-only, so node ids are a topological order and the backward sweep
//! simply walks them in reverse. Binary elementwise operations broadcast
//! along any axis of extent one.
//!
//! Kinks use a zero subgradient: `relu'(0) = 0`, `sign(0) = 0`,
//! `max(x, c)' = 0` at `x = c`, and `sqrt'(0) = 0`.

use std::cell::{Ref, RefCell};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sqrt(usize),
    Square(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    MaxConst(usize, f64),
    Sin(usize),
    Cos(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    SelectCols(usize, Rc<[usize]>),
    SelectRows(usize, Rc<[usize]>),
    ConcatCols(Vec<usize>),
    Softmax(usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of a computation, differentiated with [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of one scalar output with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros when the output does not depend on it.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, avoiding a copy for large parameters.
    pub fn take(&mut self, v: Var<'_>) -> Tensor {
        match self.grads[v.id].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.id];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

#[inline]
fn bidx(shape: (usize, usize), r: usize, c: usize) -> usize {
    let rr = if shape.0 == 1 { 0 } else { r };
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
}

fn zip_broadcast(a: &Tensor, b: &Tensor, out: (usize, usize), f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(out.0, out.1, data).expect("shape");
    }
    let (sa, sb) = (a.shape(), b.shape());
    let (ad, bd) = (a.data(), b.data());
    Tensor::from_fn(out.0, out.1, |r, c| f(ad[bidx(sa, r, c)], bd[bidx(sb, r, c)]))
}

/// Accumulates `g * local(r, c)` into a gradient of shape `shape`, summing over broadcast axes.
fn reduce_into(shape: (usize, usize), g: &Tensor, local: impl Fn(usize, usize, usize) -> f64) -> Tensor {
    let mut out = Tensor::zeros(shape.0, shape.1);
    let (gr, gc) = g.shape();
    let gd = g.data();
    let od = out.data_mut();
    for r in 0..gr {
        for c in 0..gc {
            let k = r * gc + c;
            od[bidx(shape, r, c)] += gd[k] * local(r, c, k);
        }
    }
    out
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.axpy(1.0, &g),
        None => *slot = Some(g),
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

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records a leaf (parameter or constant input).
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    /// Concatenates along columns; all inputs must share the row count.
    pub fn concat_cols(&self, parts: &[Var<'_>]) -> Result<Var<'_>> {
        let nodes = self.nodes.borrow();
        let rows = parts.first().map_or(0, |p| nodes[p.id].value.rows());
        let mut cols = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.rows() != rows {
                return Err(Error::ShapeMismatch { op: "concat_cols", lhs: (rows, cols), rhs: v.shape() });
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, off + c, v.get(r, c));
                }
            }
            off += v.cols();
        }
        drop(nodes);
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if out_shape != (1, 1) {
            return Err(Error::invalid(format!("gradient requires a scalar output, got {out_shape:?}")));
        }
        let n = output.id + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::scalar(1.0));
        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let ga = reduce_into(val(*a).shape(), &g, |_, _, _| 1.0);
                    let gb = reduce_into(val(*b).shape(), &g, |_, _, _| 1.0);
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Sub(a, b) => {
                    let ga = reduce_into(val(*a).shape(), &g, |_, _, _| 1.0);
                    let gb = reduce_into(val(*b).shape(), &g, |_, _, _| -1.0);
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (sa, sb) = (va.shape(), vb.shape());
                    let ga = reduce_into(sa, &g, |r, c, _| vb.data()[bidx(sb, r, c)]);
                    let gb = reduce_into(sb, &g, |r, c, _| va.data()[bidx(sa, r, c)]);
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let (sa, sb) = (va.shape(), vb.shape());
                    let ga = reduce_into(sa, &g, |r, c, _| 1.0 / vb.data()[bidx(sb, r, c)]);
                    let gb = reduce_into(sb, &g, |r, c, _| {
                        let y = vb.data()[bidx(sb, r, c)];
                        -va.data()[bidx(sa, r, c)] / (y * y)
                    });
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Neg(a) => accumulate(&mut grads[*a], g.map(|x| -x)),
                Op::Scale(a, s) => accumulate(&mut grads[*a], g.map(|x| x * s)),
                Op::Offset(a) => accumulate(&mut grads[*a], g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut ga = Tensor::zeros(va.rows(), va.cols());
                    gemm(&g, false, vb, true, &mut ga, 0.0);
                    let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                    gemm(va, true, &g, false, &mut gb, 0.0);
                    accumulate(&mut grads[*a], ga);
                    accumulate(&mut grads[*b], gb);
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    accumulate(&mut grads[*a], elementwise(&g, y, |g, y| g * y));
                }
                Op::Log(a) => accumulate(&mut grads[*a], elementwise(&g, val(*a), |g, x| g / x)),
                Op::Abs(a) => accumulate(&mut grads[*a], elementwise(&g, val(*a), |g, x| g * sign(x))),
                Op::Sqrt(a) => {
                    let y = &node.value;
                    let ga = elementwise(&g, y, |g, y| if y > 0.0 { g * 0.5 / y } else { 0.0 });
                    accumulate(&mut grads[*a], ga);
                }
                Op::Square(a) => accumulate(&mut grads[*a], elementwise(&g, val(*a), |g, x| 2.0 * g * x)),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    accumulate(&mut grads[*a], elementwise(&g, y, |g, y| g * y * (1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    accumulate(&mut grads[*a], elementwise(&g, y, |g, y| g * (1.0 - y * y)));
                }
                Op::Relu(a) => {
                    accumulate(&mut grads[*a], elementwise(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 }))
                }
                Op::MaxConst(a, c) => {
                    accumulate(&mut grads[*a], elementwise(&g, val(*a), |g, x| if x > *c { g } else { 0.0 }))
                }
                Op::Sin(a) => accumulate(&mut grads[*a], elementwise(&g, val(*a), |g, x| g * x.cos())),
                Op::Cos(a) => accumulate(&mut grads[*a], elementwise(&g, val(*a), |g, x| -g * x.sin())),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads[*a], Tensor::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    let n = (r * c).max(1) as f64;
                    accumulate(&mut grads[*a], Tensor::filled(r, c, g.item() / n));
                }
                Op::SumRows(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads[*a], Tensor::from_fn(r, c, |i, _| g.get(i, 0)));
                }
                Op::SumCols(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads[*a], Tensor::from_fn(r, c, |_, j| g.get(0, j)));
                }
                Op::SelectCols(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        for (k, &j) in idx.iter().enumerate() {
                            let v = ga.get(i, j) + g.get(i, k);
                            ga.set(i, j, v);
                        }
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::SelectRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut ga = Tensor::zeros(r, c);
                    for (k, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            let v = ga.get(i, j) + g.get(k, j);
                            ga.set(i, j, v);
                        }
                    }
                    accumulate(&mut grads[*a], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        let gp = Tensor::from_fn(r, c, |i, j| g.get(i, off + j));
                        off += c;
                        accumulate(&mut grads[p], gp);
                    }
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let (r, c) = y.shape();
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g.get(i, j) * y.get(i, j)).sum();
                        for j in 0..c {
                            ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads[*a], ga);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Tensor::from_vec(g.rows(), g.cols(), data).expect("shape")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    fn binary(self, rhs: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, usize, usize)> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape));
        let (a, b) = (self.value(), rhs.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        Ok((zip_broadcast(&a, &b, shape, f), self.id, rhs.id))
    }

    pub fn try_add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (v, a, b) = self.binary(rhs, "add", |x, y| x + y)?;
        Ok(self.tape.push(v, Op::Add(a, b)))
    }

    pub fn try_sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (v, a, b) = self.binary(rhs, "sub", |x, y| x - y)?;
        Ok(self.tape.push(v, Op::Sub(a, b)))
    }

    pub fn try_mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (v, a, b) = self.binary(rhs, "mul", |x, y| x * y)?;
        Ok(self.tape.push(v, Op::Mul(a, b)))
    }

    pub fn try_div(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (v, a, b) = self.binary(rhs, "div", |x, y| x / y)?;
        Ok(self.tape.push(v, Op::Div(a, b)))
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&rhs.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, rhs.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn offset(self, c: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |x| x + c)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x * x)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// Elementwise `max(x, c)` for a constant `c`.
    pub fn max_const(self, c: f64) -> Var<'t> {
        self.unary(Op::MaxConst(self.id, c), |x| x.max(c))
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(Op::Cos(self.id), f64::cos)
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let (s, n) = {
            let v = self.value();
            (v.sum(), v.len().max(1))
        };
        self.tape.push(Tensor::scalar(s / n as f64), Op::Mean(self.id))
    }

    /// Sums each row, giving a `rows x 1` column.
    pub fn sum_rows(self) -> Var<'t> {
        let v = {
            let x = self.value();
            Tensor::from_fn(x.rows(), 1, |r, _| x.row_slice(r).iter().sum())
        };
        self.tape.push(v, Op::SumRows(self.id))
    }

    /// Sums each column, giving a `1 x cols` row.
    pub fn sum_cols(self) -> Var<'t> {
        let v = {
            let x = self.value();
            let mut out = Tensor::zeros(1, x.cols());
            for r in 0..x.rows() {
                for (o, v) in out.data_mut().iter_mut().zip(x.row_slice(r)) {
                    *o += v;
                }
            }
            out
        };
        self.tape.push(v, Op::SumCols(self.id))
    }

    /// Gathers the listed columns (repeats allowed).
    pub fn select_cols(self, idx: &Rc<[usize]>) -> Var<'t> {
        let v = {
            let x = self.value();
            Tensor::from_fn(x.rows(), idx.len(), |r, k| x.get(r, idx[k]))
        };
        self.tape.push(v, Op::SelectCols(self.id, idx.clone()))
    }

    pub fn col(self, c: usize) -> Var<'t> {
        self.select_cols(&Rc::from(vec![c]))
    }

    pub fn cols_range(self, start: usize, len: usize) -> Var<'t> {
        self.select_cols(&Rc::from((start..start + len).collect::<Vec<_>>()))
    }

    pub fn select_rows(self, idx: &Rc<[usize]>) -> Var<'t> {
        let v = {
            let x = self.value();
            Tensor::from_fn(idx.len(), x.cols(), |k, c| x.get(idx[k], c))
        };
        self.tape.push(v, Op::SelectRows(self.id, idx.clone()))
    }

    pub fn row(self, r: usize) -> Var<'t> {
        self.select_rows(&Rc::from(vec![r]))
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Var<'t> {
        let v = {
            let x = self.value();
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                let row = x.row_slice(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for (c, v) in row.iter().enumerate() {
                    out.set(r, c, (v - m).exp() / z);
                }
            }
            out
        };
        self.tape.push(v, Op::Softmax(self.id))
    }

    /// Row-wise L1 norm (`rows x 1`).
    pub fn norm1_rows(self) -> Var<'t> {
        self.abs().sum_rows()
    }

    /// Row-wise Euclidean norm (`rows x 1`).
    pub fn norm2_rows(self) -> Var<'t> {
        self.square().sum_rows().sqrt()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

macro_rules! impl_binop {
    ($trait:ident, $method:ident, $try:ident, $scalar:expr) => {
        impl<'t> $trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            /// Panics on incompatible shapes; use the `try_` form to handle that case.
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.$try(rhs).expect("incompatible shapes")
            }
        }
        impl<'t> $trait<f64> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: f64) -> Var<'t> {
                #[allow(clippy::redundant_closure_call)]
                ($scalar)(self, rhs)
            }
        }
    };
}

impl_binop!(Add, add, try_add, |v: Var<'t>, c: f64| v.offset(c));
impl_binop!(Sub, sub, try_sub, |v: Var<'t>, c: f64| v.offset(-c));
impl_binop!(Mul, mul, try_mul, |v: Var<'t>, c: f64| v.scale(c));
impl_binop!(Div, div, try_div, |v: Var<'t>, c: f64| v.scale(1.0 / c));

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }
}

/// Central finite-difference gradient of a scalar function.
pub fn numerical_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// `|a - b| / max(|a|, |b|)` over whole gradient vectors; 0 when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(x: &Tensor, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> Tensor {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let out = f(v);
        tape.backward(out).unwrap().get(v)
    }

    fn eval(x: &Tensor, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) -> f64 {
        let tape = Tape::new();
        f(tape.var(x.clone())).item()
    }

    fn check(x: Tensor, f: impl for<'t> Fn(Var<'t>) -> Var<'t> + Copy) {
        let g = grad_of(&x, f);
        let n = numerical_gradient(&x, 1e-5, |p| eval(p, f));
        let err = relative_error(&g, &n);
        assert!(err < 1e-6, "relative error {err}: {g:?} vs {n:?}");
    }

    fn sample() -> Tensor {
        Tensor::from_fn(3, 4, |r, c| 0.3 + 0.17 * r as f64 - 0.11 * c as f64 + 0.05 * (r * c) as f64)
    }

    #[test]
    fn sigmoid_slope_at_zero_is_quarter() {
        let g = grad_of(&Tensor::scalar(0.0), |x| x.sigmoid());
        assert_eq!(g.item(), 0.25);
    }

    #[test]
    fn l1_norm_gradient_is_sign() {
        let g = grad_of(&Tensor::row(vec![3.0, -2.0]), |x| x.norm1_rows().sum());
        assert_eq!(g.data(), &[1.0, -1.0]);
    }

    #[test]
    fn kinks_use_zero_subgradient() {
        let x = Tensor::row(vec![0.0]);
        assert_eq!(grad_of(&x, |v| v.relu().sum()).item(), 0.0);
        assert_eq!(grad_of(&x, |v| v.abs().sum()).item(), 0.0);
        assert_eq!(grad_of(&x, |v| v.max_const(0.0).sum()).item(), 0.0);
        assert_eq!(grad_of(&x, |v| v.sqrt().sum()).item(), 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let tape = Tape::new();
        let v = tape.var(Tensor::zeros(2, 2));
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn unary_primitives_match_finite_differences() {
        let x = sample();
        check(x.clone(), |v| v.exp().sum());
        check(x.map(|v| v + 2.0), |v| v.ln().sum());
        check(x.clone(), |v| v.abs().sum());
        check(x.map(|v| v + 2.0), |v| v.sqrt().sum());
        check(x.clone(), |v| v.square().mean());
        check(x.clone(), |v| v.sigmoid().sum());
        check(x.clone(), |v| v.tanh().sum());
        check(x.clone(), |v| v.relu().sum());
        check(x.clone(), |v| v.max_const(0.2).sum());
        check(x.clone(), |v| v.sin().sum());
        check(x.clone(), |v| v.cos().sum());
        check(x.clone(), |v| (-v).scale(3.0).offset(1.0).square().sum());
        check(x.clone(), |v| v.softmax().square().sum());
        check(x.clone(), |v| v.sum_rows().square().sum());
        check(x.clone(), |v| v.sum_cols().square().sum());
        check(x.clone(), |v| v.norm2_rows().sum());
    }

    #[test]
    fn binary_and_structural_primitives_match_finite_differences() {
        let x = sample();
        check(x.clone(), |v| {
            let a = v.cols_range(0, 2);
            let b = v.cols_range(2, 2);
            (a * b + a / (b + 3.0) - b).sum()
        });
        check(x.clone(), |v| {
            let col = v.col(1);
            let row = v.row(2);
            ((v * col) / (row + 5.0)).square().sum()
        });
        check(x.clone(), |v| {
            let w = v.cols_range(0, 3).transpose_free();
            v.cols_range(0, 3).matmul(w).unwrap().sum()
        });
        check(x.clone(), |v| {
            let idx: Rc<[usize]> = Rc::from(vec![3, 0, 0, 2]);
            let rows: Rc<[usize]> = Rc::from(vec![2, 2, 0]);
            let t = v.tape();
            let cat = t.concat_cols(&[v.select_cols(&idx), v.col(1)]).unwrap();
            cat.select_rows(&rows).square().sum()
        });
    }

    // Test helper: a 3x3 slice of the same variable standing in for a second operand.
    trait TransposeFree<'t> {
        fn transpose_free(self) -> Var<'t>;
    }

    impl<'t> TransposeFree<'t> for Var<'t> {
        fn transpose_free(self) -> Var<'t> {
            let rows: Rc<[usize]> = Rc::from(vec![0, 1, 2]);
            self.select_rows(&rows)
        }
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let g = grad_of(&Tensor::scalar(1.5), |x| x * x * x);
        assert!((g.item() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
    }
}
