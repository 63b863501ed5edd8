//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse creation order, so gradient
//! accumulation order is fixed and results are bitwise reproducible.

use super::matrix::{sigmoid_scalar, softplus_scalar, Matrix};
use super::{NumericsError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var, f64),
    ColStandardize(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    Sum(Var),
    MeanRows(Var),
    Pick(Var, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default, Clone)]
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

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value the loss is not differentiated against.
    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Copies the value of `v` into a new constant node (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.value(a).shape(), self.value(row).shape());
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(NumericsError::shape(op, sa, sr));
        }
        Ok(())
    }

    /// Adds a 1×cols row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// Multiplies every row of `a` elementwise by a 1×cols row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&r) {
                *o *= b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid_scalar);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    /// `ln(1 + e^x)`; `softplus(-x) = -ln σ(x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus_scalar);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let s = super::matrix::softmax(x.row(r));
            out.row_mut(r).copy_from_slice(&s);
        }
        let ng = self.ng(a);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LogSoftmaxRows(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = x.row(r);
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::LayerNormRows(a, eps), ng)
    }

    /// Standardizes each column to zero mean and unit (population) variance,
    /// then scales by `1/√rows`, so every non-degenerate column has unit norm.
    /// Zero-variance columns become zeros.
    pub fn col_standardize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, m) = x.shape();
        let mut out = Matrix::zeros(n, m);
        let scale = 1.0 / (n as f64).sqrt();
        for c in 0..m {
            let col: Vec<f64> = (0..n).map(|r| x.get(r, c)).collect();
            let (mean, var) = mean_var(&col);
            if var <= STD_FLOOR {
                continue;
            }
            let inv = scale / var.sqrt();
            for (r, v) in col.iter().enumerate() {
                out.set(r, c, (v - mean) * inv);
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::ColStandardize(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(out, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |p| self.value(*p).cols());
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(NumericsError::shape("concat_rows", (rows, cols), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| self.value(*p).rows());
        let mut cols = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(NumericsError::shape("concat_cols", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let v = self.value(*p);
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.rows() {
            return Err(NumericsError::Index { op: "slice_rows", index: start + len, bound: x.rows() });
        }
        let cols = x.cols();
        let out = Matrix::from_vec(len, cols, x.data()[start * cols..(start + len) * cols].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceRows(a, start), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if start + len > x.cols() {
            return Err(NumericsError::Index { op: "slice_cols", index: start + len, bound: x.cols() });
        }
        let mut out = Matrix::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::SliceCols(a, start), ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(rows, cols)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn pick(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        let x = self.value(a);
        if r >= x.rows() || c >= x.cols() {
            return Err(NumericsError::Index { op: "pick", index: r * x.cols() + c, bound: x.len() });
        }
        let out = Matrix::scalar(x.get(r, c));
        let ng = self.ng(a);
        Ok(self.push(out, Op::Pick(a, r, c), ng))
    }

    /// `x · W + b` for a row-batch `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(NumericsError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.matmul_t(val(*b))?)?;
                }
                if self.ng(*b) {
                    accumulate(grads, *b, val(*a).t_matmul(g)?)?;
                }
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, g.clone())?;
                self.acc_if(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, g.clone())?;
                self.acc_if(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.hadamard(val(*b))?)?;
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.hadamard(val(*a))?)?;
                }
            }
            Op::AddRow(a, row) => {
                self.acc_if(grads, *a, g.clone())?;
                if self.ng(*row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *row, s)?;
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                if self.ng(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        for (o, w) in da.row_mut(r).iter_mut().zip(rv.data()) {
                            *o *= w;
                        }
                    }
                    accumulate(grads, *a, da)?;
                }
                if self.ng(*row) {
                    let av = val(*a);
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for ((o, gv), x) in s.data_mut().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += gv * x;
                        }
                    }
                    accumulate(grads, *row, s)?;
                }
            }
            Op::Scale(a, s) => self.acc_if(grads, *a, g.scale(*s))?,
            Op::Relu(a) => {
                let x = val(*a);
                let d = zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.acc_if(grads, *a, d)?;
            }
            Op::Sigmoid(a) => {
                let d = zip_map(g, &node.value, |gv, y| gv * y * (1.0 - y));
                self.acc_if(grads, *a, d)?;
            }
            Op::Tanh(a) => {
                let d = zip_map(g, &node.value, |gv, y| gv * (1.0 - y * y));
                self.acc_if(grads, *a, d)?;
            }
            Op::Softplus(a) => {
                let d = zip_map(g, val(*a), |gv, x| gv * sigmoid_scalar(x));
                self.acc_if(grads, *a, d)?;
            }
            Op::Square(a) => {
                let d = zip_map(g, val(*a), |gv, x| 2.0 * gv * x);
                self.acc_if(grads, *a, d)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.acc_if(grads, *a, d)?;
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let total: f64 = g.row(r).iter().sum();
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = gv - yv.exp() * total;
                    }
                }
                self.acc_if(grads, *a, d)?;
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let n = x.cols() as f64;
                let mut d = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (_, var) = mean_var(x.row(r));
                    let inv = 1.0 / (var + eps).sqrt();
                    let gm: f64 = g.row(r).iter().sum::<f64>() / n;
                    let gy: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = inv * (gv - gm - yv * gy);
                    }
                }
                self.acc_if(grads, *a, d)?;
            }
            Op::ColStandardize(a) => {
                let x = val(*a);
                let (n, m) = x.shape();
                let nf = n as f64;
                let scale = 1.0 / nf.sqrt();
                let mut d = Matrix::zeros(n, m);
                for c in 0..m {
                    let col: Vec<f64> = (0..n).map(|r| x.get(r, c)).collect();
                    let (mean, var) = mean_var(&col);
                    if var <= STD_FLOOR {
                        continue;
                    }
                    let sd = var.sqrt();
                    let z: Vec<f64> = col.iter().map(|v| (v - mean) / sd).collect();
                    let dz: Vec<f64> = (0..n).map(|r| g.get(r, c) * scale).collect();
                    let gm = dz.iter().sum::<f64>() / nf;
                    let gz = dz.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for r in 0..n {
                        d.set(r, c, (dz[r] - gm - z[r] * gz) / sd);
                    }
                }
                self.acc_if(grads, *a, d)?;
            }
            Op::Transpose(a) => self.acc_if(grads, *a, g.transpose())?,
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = val(*p).shape();
                    if self.ng(*p) {
                        let piece = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec())?;
                        accumulate(grads, *p, piece)?;
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = val(*p).shape();
                    if self.ng(*p) {
                        let mut piece = Matrix::zeros(r, c);
                        for i in 0..r {
                            piece.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        accumulate(grads, *p, piece)?;
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                if self.ng(*a) {
                    let (r, c) = val(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(grads, *a, d)?;
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let (r, c) = val(*a).shape();
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        d.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(grads, *a, d)?;
                }
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                self.acc_if(grads, *a, g.reshape(r, c)?)?;
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                self.acc_if(grads, *a, Matrix::filled(r, c, g.item()))?;
            }
            Op::MeanRows(a) => {
                if self.ng(*a) {
                    let (r, c) = val(*a).shape();
                    let inv = 1.0 / r as f64;
                    let mut d = Matrix::zeros(r, c);
                    for i in 0..r {
                        for (o, gv) in d.row_mut(i).iter_mut().zip(g.data()) {
                            *o = gv * inv;
                        }
                    }
                    accumulate(grads, *a, d)?;
                }
            }
            Op::Pick(a, r, c) => {
                if self.ng(*a) {
                    let (rows, cols) = val(*a).shape();
                    let mut d = Matrix::zeros(rows, cols);
                    d.set(*r, *c, g.item());
                    accumulate(grads, *a, d)?;
                }
            }
        }
        Ok(())
    }

    fn acc_if(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
        if self.ng(v) {
            accumulate(grads, v, g)?;
        }
        Ok(())
    }
}

const STD_FLOOR: f64 = 1e-24;

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
