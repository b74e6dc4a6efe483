//! Reverse-mode differentiation over a single-use evaluation tape.
//!
//! Every node holds a 2-D value (`rows x cols`; rank-1 tensors act as one
//! row). Ops are coarse: a matrix product is one node, so the backward pass is
//! a handful of GEMMs rather than millions of scalar closures.

use super::linalg::{gemm, Operand};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x[B, in] * w[out, in]^T`
    MatMulT(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Min(Var, Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Reshape(Var),
}

enum Value<'a> {
    Borrowed(&'a Tensor),
    Owned(Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Borrowed(t) => t,
            Value::Owned(t) => t,
        }
    }
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Value<'a>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(Value::Owned(value), op, needs)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, false)
    }

    /// Differentiable leaf borrowed from a parameter set.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, true)
    }

    /// Differentiable leaf owning its value.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, inp) = dims(self.value(x));
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || ws[1] != inp {
            return Err(Error::dim("matmul input width", ws.get(1).copied().unwrap_or(0), inp));
        }
        let out = ws[0];
        let mut y = vec![0.0; b * out];
        gemm(
            b,
            inp,
            out,
            Operand::rows(self.value(x).data(), inp),
            Operand::transposed(self.value(w).data(), inp),
            0.0,
            &mut y,
        );
        Ok(self.op(Tensor::matrix(b, out, y)?, Op::MatMulT(x, w), &[x, w]))
    }

    fn row_broadcast(&mut self, x: Var, r: Var, mul: bool) -> Result<Var> {
        let (b, n) = dims(self.value(x));
        if self.value(r).len() != n {
            return Err(Error::dim("row broadcast", n, self.value(r).len()));
        }
        let rv = self.value(r).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, &c) in row.iter_mut().zip(rv) {
                if mul {
                    *o *= c;
                } else {
                    *o += c;
                }
            }
        }
        let t = Tensor::matrix(b, n, out)?;
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        Ok(self.op(t, op, &[x, r]))
    }

    /// `x[B, n] + r[n]` on every row.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, false)
    }

    /// `x[B, n] * r[n]` on every row.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast(x, r, true)
    }

    /// `x[B, n] * c[B, 1]`: scales each row by its own factor.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (b, n) = dims(self.value(x));
        if self.value(c).len() != b {
            return Err(Error::dim("column broadcast", b, self.value(c).len()));
        }
        let cv = self.value(c).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &s) in out.chunks_mut(n.max(1)).zip(cv) {
            for o in row.iter_mut() {
                *o *= s;
            }
        }
        Ok(self.op(Tensor::matrix(b, n, out)?, Op::MulCol(x, c), &[x, c]))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::dim("elementwise operand", ta.len(), tb.len()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let (r, c) = dims(ta);
        Ok(self.op(Tensor::matrix(r, c, data)?, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, f64::min, Op::Min(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let (r, c) = dims(&t);
        let t = t.reshaped(vec![r, c]).expect("same length");
        self.op(t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.op(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        self.op(Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    /// `[B, n] -> [B, 1]` row sums.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (b, n) = dims(self.value(x));
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n.max(1))
            .map(|r| r.iter().sum())
            .collect();
        let t = Tensor::matrix(b, 1, data).expect("row sums");
        self.op(t, Op::RowSum(x), &[x])
    }

    /// Column-wise concatenation of equally tall blocks.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let b = self.value(parts[0]).rows();
        let mut width = 0;
        for &p in parts {
            let (r, c) = dims(self.value(p));
            if r != b {
                return Err(Error::dim("concat rows", b, r));
            }
            width += c;
        }
        let mut out = Vec::with_capacity(b * width);
        for row in 0..b {
            for &p in parts {
                let t = self.value(p);
                let c = t.cols();
                out.extend_from_slice(&t.data()[row * c..(row + 1) * c]);
            }
        }
        Ok(self.op(Tensor::matrix(b, width, out)?, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, n) = dims(self.value(x));
        if start + len > n {
            return Err(Error::dim("column slice", n, start + len));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * len);
        for row in 0..b {
            out.extend_from_slice(&src[row * n + start..row * n + start + len]);
        }
        Ok(self.op(Tensor::matrix(b, len, out)?, Op::Slice(x, start), &[x]))
    }

    /// Reinterprets the row-major data as `[rows, cols]`.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x).clone().reshaped(vec![rows, cols])?;
        Ok(self.op(t, Op::Reshape(x), &[x]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.nodes[i].value.get();
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let shaped = |like: &Tensor, data: Vec<f64>| {
            Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
        };
        let elementwise = |grads: &mut [Option<Tensor>], x: Var, f: &dyn Fn(usize) -> f64| {
            if self.needs(x) {
                let xv = self.value(x);
                let d = (0..g.len()).map(|k| g.data()[k] * f(k)).collect();
                acc(grads, x, shaped(xv, d));
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMulT(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (b, inp) = dims(xv);
                let out = wv.shape()[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; b * inp];
                    gemm(
                        b,
                        out,
                        inp,
                        Operand::rows(g.data(), out),
                        Operand::rows(wv.data(), inp),
                        0.0,
                        &mut dx,
                    );
                    acc(grads, *x, shaped(xv, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; out * inp];
                    gemm(
                        out,
                        b,
                        inp,
                        Operand::transposed(g.data(), out),
                        Operand::rows(xv.data(), inp),
                        0.0,
                        &mut dw,
                    );
                    acc(grads, *w, shaped(wv, dw));
                }
            }
            Op::AddRow(x, r) => {
                if self.needs(*x) {
                    acc(grads, *x, shaped(self.value(*x), g.data().to_vec()));
                }
                if self.needs(*r) {
                    let rv = self.value(*r);
                    let n = rv.len();
                    let mut d = vec![0.0; n];
                    for row in g.data().chunks(n.max(1)) {
                        for (a, b) in d.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    acc(grads, *r, shaped(rv, d));
                }
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x), self.value(*r));
                let n = rv.len().max(1);
                if self.needs(*x) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv * rv.data()[k % n])
                        .collect();
                    acc(grads, *x, shaped(xv, d));
                }
                if self.needs(*r) {
                    let mut d = vec![0.0; rv.len()];
                    for (k, (gv, xk)) in g.data().iter().zip(xv.data()).enumerate() {
                        d[k % n] += gv * xk;
                    }
                    acc(grads, *r, shaped(rv, d));
                }
            }
            Op::MulCol(x, c) => {
                let (xv, cv) = (self.value(*x), self.value(*c));
                let n = xv.cols().max(1);
                if self.needs(*x) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv * cv.data()[k / n])
                        .collect();
                    acc(grads, *x, shaped(xv, d));
                }
                if self.needs(*c) {
                    let d = g
                        .data()
                        .chunks(n)
                        .zip(xv.data().chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(grads, *c, shaped(cv, d));
                }
            }
            Op::Add(a, b) => {
                elementwise(grads, *a, &|_| 1.0);
                elementwise(grads, *b, &|_| 1.0);
            }
            Op::Sub(a, b) => {
                elementwise(grads, *a, &|_| 1.0);
                elementwise(grads, *b, &|_| -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                elementwise(grads, *a, &|k| bv[k]);
                elementwise(grads, *b, &|k| av[k]);
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // ties route the gradient to the first operand
                elementwise(grads, *a, &|k| if av[k] <= bv[k] { 1.0 } else { 0.0 });
                elementwise(grads, *b, &|k| if av[k] <= bv[k] { 0.0 } else { 1.0 });
            }
            Op::Scale(x, s) => elementwise(grads, *x, &|_| *s),
            Op::Offset(x) | Op::Reshape(x) => elementwise(grads, *x, &|_| 1.0),
            Op::Tanh(x) => elementwise(grads, *x, &|k| 1.0 - y.data()[k] * y.data()[k]),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                elementwise(grads, *x, &|k| if xv[k] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Sigmoid(x) => elementwise(grads, *x, &|k| y.data()[k] * (1.0 - y.data()[k])),
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                elementwise(grads, *x, &|k| sigmoid(xv[k]))
            }
            Op::Exp(x) => elementwise(grads, *x, &|k| y.data()[k]),
            Op::Square(x) => {
                let xv = self.value(*x).data();
                elementwise(grads, *x, &|k| 2.0 * xv[k])
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                elementwise(grads, *x, &|k| {
                    if xv[k] >= *lo && xv[k] <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    acc(grads, *x, Tensor::filled(xv.shape(), g.data()[0]));
                }
            }
            Op::MeanAll(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let v = g.data()[0] / xv.len().max(1) as f64;
                    acc(grads, *x, Tensor::filled(xv.shape(), v));
                }
            }
            Op::RowSum(x) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let n = xv.cols().max(1);
                    let d = (0..xv.len()).map(|k| g.data()[k / n]).collect();
                    acc(grads, *x, shaped(xv, d));
                }
            }
            Op::Concat(parts) => {
                let width = y.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let c = pv.cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for row in g.data().chunks(width.max(1)) {
                            d.extend_from_slice(&row[start..start + c]);
                        }
                        acc(grads, p, shaped(pv, d));
                    }
                    start += c;
                }
            }
            Op::Slice(x, start) => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let len = y.cols();
                    let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(xv.shape()));
                    let d = slot.data_mut();
                    for (row, gr) in g.data().chunks(len.max(1)).enumerate() {
                        for (a, b) in d[row * n + start..row * n + start + len].iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                }
            }
        }
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

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_derivative() {
        let w = Tensor::scalar(5.0);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let x = tape.constant(Tensor::scalar(3.0));
        let y = tape.mul(wv, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(wv).unwrap().data(), &[3.0]);
    }

    #[test]
    fn quadratic_derivative() {
        let w = Tensor::scalar(5.0);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let d = tape.offset(wv, -2.0);
        let y = tape.square(d);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(wv).unwrap().data(), &[6.0]);
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let w = Tensor::row(vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let wv = tape.param(&w);
        let y = tape.square(wv);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + 3x at x=2 -> dy/dx = 2x + 3 = 7
        let x = Tensor::scalar(2.0);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let lin = tape.scale(xv, 3.0);
        let y = tape.add(sq, lin).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(xv).unwrap().data(), &[7.0]);
    }

    #[test]
    fn stable_activations() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
