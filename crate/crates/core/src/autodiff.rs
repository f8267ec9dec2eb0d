//! Dense-matrix reverse-mode automatic differentiation.
//!
//! Every value is a row-major 2-D [`Tensor`] of `f64`. Scalars are `1×1`
//! tensors and vectors are single columns. A [`Tape`] records each operation
//! as it is evaluated; [`Tape::backward`] then walks the tape in reverse and
//! accumulates `∂loss/∂value` into every node that requires a gradient.
//!
//! The op set is deliberately closed: matmul, transpose, add/sub/hadamard
//! product, scaling, elementwise `exp`/`log`/`abs`/`square`/`x·ln x`, row
//! softmax, reductions, the diagonal-left product `diag(d)·x`, and
//! slicing/concatenation.
//!
//! ```
//! use lora2::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]), true);
//! let sq = tape.square(x);
//! let half = tape.scale(sq, 0.5);
//! let loss = tape.sum_all(half);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).data(), &[1.0, 2.0, 3.0, 4.0]);
//! ```

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Contract(format!(
                "tensor of shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Self {
        Self {
            rows: rows.len(),
            cols: N,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Value of a `1×1` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.cols != rhs.rows {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        let mut out = Tensor::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out);
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with("add", rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip_with("sub", rhs, |a, b| a - b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, op: &'static str, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        check_same(op, self, rhs)?;
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn add_assign(&mut self, rhs: &Tensor) {
        debug_assert_eq!(self.shape(), rhs.shape());
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    /// Copy of rows `start..start+len`.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        Tensor {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    /// Copy of columns `start..start+len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        Tensor::from_fn(self.rows, len, |i, j| self.get(i, start + j))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

// i-k-j order; the reduction over k runs in increasing index order for every
// output entry, which keeps appended zero terms from perturbing the prefix sum.
fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    let (p, q, s) = (a.rows, a.cols, b.cols);
    for i in 0..p {
        let out_row = &mut out.data[i * s..(i + 1) * s];
        for k in 0..q {
            let aik = a.data[i * q + k];
            let b_row = &b.data[k * s..(k + 1) * s];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Square(Var),
    XLogX(Var),
    SoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    MeanRows(Var),
    DiagMul(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Single-threaded operation tape.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`; zeros if nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows, node.value.cols))
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(Tensor::zeros(node.value.rows, node.value.cols));
            }
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_with("mul", self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, Op::Scale(a, factor))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// `x·ln x` with `0·ln 0 := 0`.
    pub fn xlogx(&mut self, a: Var) -> Var {
        self.unary(a, xlogx, Op::XLogX(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, rg, op)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut out = src.clone();
        for i in 0..src.rows {
            let row = &mut out.data[i * src.cols..(i + 1) * src.cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::SoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::MeanAll(a))
    }

    /// Sums each row, `[p×k] -> [p×1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_fn(t.rows, 1, |i, _| t.row(i).iter().sum());
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::SumRows(a))
    }

    /// Averages each row, `[p×k] -> [p×1]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let k = t.cols as f64;
        let out = Tensor::from_fn(t.rows, 1, |i, _| t.row(i).iter().sum::<f64>() / k);
        let rg = self.any_grad(&[a]);
        self.push(out, rg, Op::MeanRows(a))
    }

    /// `diag(d)·x` for a column `d` of length `p` and `x` of shape `[p×s]`.
    pub fn diag_mul(&mut self, d: Var, x: Var) -> Result<Var> {
        let (dt, xt) = (self.value(d), self.value(x));
        if dt.cols != 1 || dt.rows != xt.rows {
            return Err(Error::Dimension {
                op: "diag_mul",
                lhs: dt.shape(),
                rhs: xt.shape(),
            });
        }
        let out = Tensor::from_fn(xt.rows, xt.cols, |i, j| dt.data[i] * xt.get(i, j));
        let rg = self.any_grad(&[d, x]);
        Ok(self.push(out, rg, Op::DiagMul(d, x)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: t.shape(),
                rhs: [start, len],
            });
        }
        let out = t.slice_rows(start, len);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: t.shape(),
                rhs: [start, len],
            });
        }
        let out = t.slice_cols(start, len);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let cols = self.shape(*first)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(*first),
                    rhs: t.shape(),
                });
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor { rows, cols, data }, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.shape(*first),
                    rhs: s,
                });
            }
            widths.push(s[1]);
        }
        let cols: usize = widths.iter().sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = &self.nodes[p.0].value;
            for i in 0..rows {
                out.data[i * cols + offset..i * cols + offset + w].copy_from_slice(t.row(i));
            }
            offset += w;
        }
        let rg = self.any_grad(parts);
        Ok(self.push(out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Accumulates `∂loss/∂value` into every node reachable from `loss` that
    /// requires a gradient. Calling it twice without [`Tape::zero_grads`]
    /// adds the gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {shape:?}"
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Tensor>> = vec![None; n];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..n).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            let node = &mut self.nodes[idx];
            match node.grad.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let mut send = |v: Var, contrib: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match adj[v.0].as_mut() {
                Some(acc) => acc.add_assign(&contrib),
                None => adj[v.0] = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    send(*a, mm(g, &bv.transpose()));
                }
                if self.requires_grad(*b) {
                    send(*b, mm(&av.transpose(), g));
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, hadamard(g, bv));
                send(*b, hadamard(g, av));
            }
            Op::Scale(a, f) => send(*a, g.map(|v| v * f)),
            Op::Exp(a) => send(*a, hadamard(g, y)),
            Op::Log(a) => {
                let x = self.value(*a);
                send(*a, zip(g, x, |gv, xv| gv / xv));
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                send(*a, zip(g, x, |gv, xv| gv * sign(xv)));
            }
            Op::Square(a) => {
                let x = self.value(*a);
                send(*a, zip(g, x, |gv, xv| 2.0 * gv * xv));
            }
            Op::XLogX(a) => {
                let x = self.value(*a);
                send(*a, zip(g, x, |gv, xv| if xv > 0.0 { gv * (xv.ln() + 1.0) } else { 0.0 }));
            }
            Op::SoftmaxRows(a) => {
                let mut dx = Tensor::zeros(y.rows, y.cols);
                for i in 0..y.rows {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..y.cols {
                        dx.data[i * y.cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                send(*a, dx);
            }
            Op::SumAll(a) => {
                let [r, c] = self.shape(*a);
                send(*a, Tensor::filled(r, c, g.item()));
            }
            Op::MeanAll(a) => {
                let [r, c] = self.shape(*a);
                send(*a, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::SumRows(a) => {
                let [r, c] = self.shape(*a);
                send(*a, Tensor::from_fn(r, c, |i, _| g.data[i]));
            }
            Op::MeanRows(a) => {
                let [r, c] = self.shape(*a);
                send(*a, Tensor::from_fn(r, c, |i, _| g.data[i] / c as f64));
            }
            Op::DiagMul(d, x) => {
                let (dv, xv) = (self.value(*d), self.value(*x));
                if self.requires_grad(*d) {
                    let gd = Tensor::from_fn(dv.rows, 1, |i, _| {
                        g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum()
                    });
                    send(*d, gd);
                }
                if self.requires_grad(*x) {
                    send(*x, Tensor::from_fn(xv.rows, xv.cols, |i, j| dv.data[i] * g.get(i, j)));
                }
            }
            Op::SliceRows(a, start) => {
                let src = self.value(*a);
                let mut full = Tensor::zeros(src.rows, src.cols);
                full.data[start * src.cols..start * src.cols + g.len()].copy_from_slice(&g.data);
                send(*a, full);
            }
            Op::SliceCols(a, start) => {
                let src = self.value(*a);
                let mut full = Tensor::zeros(src.rows, src.cols);
                for i in 0..g.rows {
                    full.data[i * src.cols + start..i * src.cols + start + g.cols]
                        .copy_from_slice(g.row(i));
                }
                send(*a, full);
            }
            Op::ConcatRows(parts) => {
                let mut row = 0;
                for p in parts {
                    let r = self.shape(*p)[0];
                    send(*p, g.slice_rows(row, r));
                    row += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let c = self.shape(*p)[1];
                    send(*p, g.slice_cols(col, c));
                    col += c;
                }
            }
        }
    }
}

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.rows, b.cols);
    matmul_into(a, b, &mut out);
    out
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip(a, b, |x, y| x * y)
}

/// `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar node. The result is the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Domain(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point.clone(), false);
        let out = f(&mut tape, leaf)?;
        let v = tape.value(out);
        if v.shape() != [1, 1] {
            return Err(Error::Contract(format!("grad_check needs a scalar function, got {:?}", v.shape())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("function value {v} is not finite")));
        }
        Ok(v)
    };

    eval(x)?;
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape.grad(leaf);

    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
