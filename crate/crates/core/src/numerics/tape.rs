//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as a node holding its value and the
//! indices of its operands. Operands are always pushed before the nodes that
//! consume them, so walking the tape backwards is a reverse topological order
//! and each node is visited once during [`Tape::backward`].

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, norm, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    RowNormalize(Var),
    FrobeniusNorm(Var),
    GatherRows(Var, Rc<[usize]>),
    SliceRows(Var, Range<usize>),
    VStack(Rc<[Var]>),
    HStack(Rc<[Var]>),
    PickSum(Var, Rc<[(usize, usize, f64)]>),
}

#[derive(Debug)]
struct Node {
    value: Rc<Matrix>,
    op: Op,
}

/// Guard applied before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-300;

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient of `v`.
    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&self, value: Matrix, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var(nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Matrix) -> Var {
        self.push(value, Op::Param)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn value(&self, v: Var) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// Scalar held by a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    fn unary(&self, a: Var, op: Op, f: impl FnOnce(&Matrix) -> Matrix) -> Var {
        let value = f(&self.value(a));
        self.push(value, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_t(&self.value(b))?;
        Ok(self.push(value, Op::MatMulT(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.unary(a, Op::Transpose(a), Matrix::transpose)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(&self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(&self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(&self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Elementwise quotient.
    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x / y).collect();
        let (r, c) = va.shape();
        Ok(self.push(Matrix::from_raw(r, c, data), Op::Div(a, b)))
    }

    /// Adds a 1×c row vector to every row of an r×c matrix.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::shape("add_row", va.shape(), vr.shape()));
        }
        let mut out = (*va).clone();
        for r in 0..out.rows() {
            for (x, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Multiplies every entry of `a` by the 1×1 node `s`.
    pub fn mul_scalar(&self, a: Var, s: Var) -> Result<Var> {
        let vs = self.value(s);
        if vs.shape() != (1, 1) {
            return Err(Error::shape("mul_scalar", self.shape(a), vs.shape()));
        }
        let k = vs.item();
        Ok(self.unary(a, Op::MulScalar(a, s), |m| m.scale(k)))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |m| m.scale(k))
    }

    /// Adds a constant to every entry.
    pub fn offset(&self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Offset(a), |m| m.map(|x| x + k))
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, Op::Sum(a), |m| Matrix::scalar(m.sum()))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).data().len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |m| m.map(|x| x * x))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |m| m.map(f64::sqrt))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |m| m.map(f64::exp))
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn log(&self, a: Var) -> Var {
        self.unary(a, Op::Log(a), |m| m.map(|x| x.max(LOG_FLOOR).ln()))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |m| m.map(sigmoid))
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), |m| m.map(softplus))
    }

    /// `x · σ(x)`.
    pub fn silu(&self, a: Var) -> Var {
        self.unary(a, Op::Silu(a), |m| m.map(|x| x * sigmoid(x)))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        self.unary(a, Op::SoftmaxRows(a), Matrix::softmax_rows)
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        self.unary(a, Op::LogSoftmaxRows(a), |m| {
            let mut out = m.clone();
            for r in 0..out.rows() {
                let row = out.row_mut(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let total = row.iter().fold(0.0, |acc, x| acc + (x - max).exp());
                let lse = max + total.ln();
                row.iter_mut().for_each(|x| *x -= lse);
            }
            out
        })
    }

    pub fn row_normalize(&self, a: Var) -> Result<Var> {
        let value = self.value(a).row_normalize()?;
        Ok(self.push(value, Op::RowNormalize(a)))
    }

    pub fn frobenius_norm(&self, a: Var) -> Var {
        self.unary(a, Op::FrobeniusNorm(a), |m| Matrix::scalar(m.frobenius_norm()))
    }

    /// Row `i` of the result is row `indices[i]` of `a`.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        Ok(self.push(value, Op::GatherRows(a, indices.into())))
    }

    pub fn slice_rows(&self, a: Var, range: Range<usize>) -> Result<Var> {
        let va = self.value(a);
        if range.start > range.end || range.end > va.rows() {
            return Err(Error::Parameter(format!(
                "row slice {range:?} out of range for {} rows",
                va.rows()
            )));
        }
        let value = va.slice_rows(range.clone());
        Ok(self.push(value, Op::SliceRows(a, range)))
    }

    pub fn vstack(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Matrix>> = parts.iter().map(|v| self.value(*v)).collect();
        let refs: Vec<&Matrix> = values.iter().map(|m| m.as_ref()).collect();
        let value = Matrix::vstack(&refs)?;
        Ok(self.push(value, Op::VStack(parts.into())))
    }

    pub fn hstack(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Matrix>> = parts.iter().map(|v| self.value(*v)).collect();
        let refs: Vec<&Matrix> = values.iter().map(|m| m.as_ref()).collect();
        let value = Matrix::hstack(&refs)?;
        Ok(self.push(value, Op::HStack(parts.into())))
    }

    /// `Σ w · a[r, c]` over the given `(r, c, w)` triples, as a 1×1 node.
    pub fn pick_sum(&self, a: Var, picks: &[(usize, usize, f64)]) -> Result<Var> {
        let va = self.value(a);
        let mut total = 0.0;
        for &(r, c, w) in picks {
            if r >= va.rows() || c >= va.cols() {
                return Err(Error::Parameter(format!(
                    "pick ({r}, {c}) out of range for {:?}",
                    va.shape()
                )));
            }
            total += w * va.get(r, c);
        }
        Ok(self.push(Matrix::scalar(total), Op::PickSum(a, picks.into())))
    }

    /// Gradients of the scalar `loss` with respect to every node that feeds it.
    /// Parameters that do not influence `loss` get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!("backward needs a 1x1 loss, got {shape:?}")));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| -> &Matrix { &nodes[v.0].value };
            let mut acc = |v: Var, contrib: Matrix| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Param | Op::Constant => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul_t(val(*b))?);
                    acc(*b, val(*a).t_matmul(&g)?);
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.matmul(val(*b))?);
                    acc(*b, g.t_matmul(val(*a))?);
                }
                Op::Transpose(a) => acc(*a, g.transpose()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.hadamard(val(*b))?);
                    acc(*b, g.hadamard(val(*a))?);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = zip3(&g, vb, vb, |g, y, _| g / y);
                    let gb = zip3(&g, va, vb, |g, x, y| -g * x / (y * y));
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, x) in gr.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    acc(*a, g.clone());
                    acc(*row, Matrix::from_raw(1, gr.len(), gr));
                }
                Op::MulScalar(a, s) => {
                    let k = val(*s).item();
                    let gs = dot(g.data(), val(*a).data());
                    acc(*a, g.scale(k));
                    acc(*s, Matrix::scalar(gs));
                }
                Op::Scale(a, k) => acc(*a, g.scale(*k)),
                Op::Offset(a) => acc(*a, g.clone()),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(*a, Matrix::filled(r, c, g.item()));
                }
                Op::Square(a) => acc(*a, zip3(&g, val(*a), val(*a), |g, x, _| 2.0 * g * x)),
                Op::Sqrt(a) => acc(*a, zip3(&g, &node.value, &node.value, |g, y, _| g / (2.0 * y))),
                Op::Exp(a) => acc(*a, g.hadamard(&node.value)?),
                Op::Log(a) => acc(*a, zip3(&g, val(*a), val(*a), |g, x, _| g / x.max(LOG_FLOOR))),
                Op::Sigmoid(a) => acc(*a, zip3(&g, &node.value, &node.value, |g, y, _| g * y * (1.0 - y))),
                Op::Softplus(a) => acc(*a, zip3(&g, val(*a), val(*a), |g, x, _| g * sigmoid(x))),
                Op::Silu(a) => acc(
                    *a,
                    zip3(&g, val(*a), val(*a), |g, x, _| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    }),
                ),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut out = g.clone();
                    for r in 0..y.rows() {
                        let inner = dot(g.row(r), y.row(r));
                        for (o, yv) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o = yv * (*o - inner);
                        }
                    }
                    acc(*a, out);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut out = g.clone();
                    for r in 0..y.rows() {
                        let total = g.row(r).iter().fold(0.0, |s, x| s + x);
                        for (o, yv) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o -= yv.exp() * total;
                        }
                    }
                    acc(*a, out);
                }
                Op::RowNormalize(a) => {
                    let (x, y) = (val(*a), &node.value);
                    let mut out = g.clone();
                    for r in 0..y.rows() {
                        let n = norm(x.row(r));
                        let inner = dot(g.row(r), y.row(r));
                        for (o, yv) in out.row_mut(r).iter_mut().zip(y.row(r)) {
                            *o = (*o - yv * inner) / n;
                        }
                    }
                    acc(*a, out);
                }
                Op::FrobeniusNorm(a) => {
                    let n = node.value.item();
                    let k = if n > 0.0 { g.item() / n } else { 0.0 };
                    acc(*a, val(*a).scale(k));
                }
                Op::GatherRows(a, idx) => {
                    let (r, c) = val(*a).shape();
                    let mut out = Matrix::zeros(r, c);
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, x) in out.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(*a, out);
                }
                Op::SliceRows(a, range) => {
                    let (r, c) = val(*a).shape();
                    let mut out = Matrix::zeros(r, c);
                    out.data_mut()[range.start * c..range.end * c].copy_from_slice(g.data());
                    acc(*a, out);
                }
                Op::VStack(parts) => {
                    let mut start = 0;
                    for p in parts.iter() {
                        let rows = val(*p).rows();
                        acc(*p, g.slice_rows(start..start + rows));
                        start += rows;
                    }
                }
                Op::HStack(parts) => {
                    let mut start = 0;
                    for p in parts.iter() {
                        let (rows, cols) = val(*p).shape();
                        let mut out = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            out.extend_from_slice(&g.row(r)[start..start + cols]);
                        }
                        acc(*p, Matrix::from_raw(rows, cols, out));
                        start += cols;
                    }
                }
                Op::PickSum(a, picks) => {
                    let (r, c) = val(*a).shape();
                    let mut out = Matrix::zeros(r, c);
                    let gv = g.item();
                    for &(pr, pc, w) in picks.iter() {
                        out.data_mut()[pr * c + pc] += w * gv;
                    }
                    acc(*a, out);
                }
            }
            // Only leaves keep their gradient after the sweep.
            if matches!(node.op, Op::Param) {
                grads[i] = Some(g);
            }
        }

        for (i, node) in nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Param) && grads[i].is_none() {
                let (r, c) = node.value.shape();
                grads[i] = Some(Matrix::zeros(r, c));
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip3(g: &Matrix, a: &Matrix, b: &Matrix, f: impl Fn(f64, f64, f64) -> f64) -> Matrix {
    let data = g
        .data()
        .iter()
        .zip(a.data())
        .zip(b.data())
        .map(|((g, a), b)| f(*g, *a, *b))
        .collect();
    Matrix::from_raw(g.rows(), g.cols(), data)
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
