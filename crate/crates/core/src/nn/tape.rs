//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a `1 × 1` loss walks the recording in reverse and
//! returns gradients for every parameter leaf that was bound with
//! [`Tape::param`]. Tapes are single use.

use std::collections::HashMap;

use super::{matrix::dot, Gradients, Matrix, ParamId, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    Ln(Var),
    MulCol(Var, Var),
    RowDot(Var, Var),
    Softmax(Var),
    LayerNorm(Var, f64),
    L2Normalize(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather(Var, Vec<usize>),
    CrossEntropy(Var, Vec<usize>),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const NORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const)
    }

    /// Binds a parameter as a leaf. Repeated binds of the same id return the
    /// same variable so that gradients accumulate in one place.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(params.get(id).clone(), Op::Param(id));
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        self.push(value, Op::MatMulNt(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Matrix::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p + q);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p - q);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p * q);
        self.push(value, Op::Mul(a, b))
    }

    fn broadcast_row(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows(), 1, "broadcast operand must be a row");
        assert_eq!(x.cols(), r.cols(), "broadcast width mismatch");
        let mut out = x.clone();
        for i in 0..x.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o = f(*o, b);
            }
        }
        out
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.broadcast_row(a, row, |p, q| p + q);
        self.push(value, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.broadcast_row(a, row, |p, q| p * q);
        self.push(value, Op::MulRow(a, row))
    }

    /// `scale * a + shift`
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|x| scale * x + shift);
        self.push(value, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln(a))
    }

    /// Scales row `i` of `a` by `col[i]` (`col: rows × 1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!((c.rows(), c.cols()), (x.rows(), 1), "mul_col shape");
        let mut value = x.clone();
        for i in 0..x.rows() {
            let s = c.get(i, 0);
            for v in value.row_mut(i) {
                *v *= s;
            }
        }
        self.push(value, Op::MulCol(a, col))
    }

    /// Per-row inner products, `rows × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "row_dot shape");
        let data = (0..x.rows()).map(|i| dot(x.row(i), y.row(i))).collect();
        let value = Matrix::from_vec(x.rows(), 1, data);
        self.push(value, Op::RowDot(a, b))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        self.push(value, Op::Softmax(a))
    }

    /// Row-wise standardisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let row = value.row_mut(i);
            let (mean, inv) = moments(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(value, Op::LayerNorm(a, eps))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let n = (dot(row, row) + NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        self.push(value, Op::L2Normalize(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "column slice out of range");
        let mut value = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            value
                .row_mut(i)
                .copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                value.row_mut(i)[off..off + src.cols()].copy_from_slice(src.row(i));
                off += src.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let src = self.value(p);
            assert_eq!(src.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(src.data());
            rows += src.rows();
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Selects rows of `a` by index (embedding lookup).
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Var {
        let src = self.value(a);
        let mut value = Matrix::zeros(index.len(), src.cols());
        for (i, &r) in index.iter().enumerate() {
            value.row_mut(i).copy_from_slice(src.row(r));
        }
        self.push(value, Op::Gather(a, index.to_vec()))
    }

    /// Mean softmax cross-entropy of each logit row against its target column.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), targets.len(), "one target per row");
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = x.row(i);
            total += log_sum_exp(row) - row[t];
        }
        let value = Matrix::from_vec(1, 1, vec![total / targets.len() as f64]);
        self.push(value, Op::CrossEntropy(logits, targets.to_vec()))
    }

    /// Mean over all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Matrix::from_vec(1, 1, vec![x.data().iter().sum::<f64>() / x.len() as f64]);
        self.push(value, Op::Mean(a))
    }

    /// Back-propagates from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        let mut out = Gradients::new(0);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            let mut send = |v: Var, d: Matrix| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    send(*a, g.matmul_nt(self.value(*b)));
                    send(*b, self.value(*a).matmul_tn(&g));
                }
                Op::MatMulNt(a, b) => {
                    send(*a, g.matmul(self.value(*b)));
                    send(*b, g.matmul_tn(self.value(*a)));
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, hadamard(&g, self.value(*b)));
                    send(*b, hadamard(&g, self.value(*a)));
                }
                Op::AddRow(a, r) => {
                    send(*r, column_sums(&g));
                    send(*a, g);
                }
                Op::MulRow(a, r) => {
                    let row = self.value(*r);
                    let x = self.value(*a);
                    let mut da = g.clone();
                    let mut dr = Matrix::zeros(1, row.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            da.set(i, j, g.get(i, j) * row.get(0, j));
                            dr.data_mut()[j] += g.get(i, j) * x.get(i, j);
                        }
                    }
                    send(*a, da);
                    send(*r, dr);
                }
                Op::Affine(a, s) => send(*a, g.map(|x| x * s)),
                Op::Tanh(a) => send(*a, zip(&g, y, |d, t| d * (1.0 - t * t))),
                Op::Sigmoid(a) => send(*a, zip(&g, y, |d, s| d * s * (1.0 - s))),
                Op::Gelu(a) => {
                    let d = zip(&g, self.value(*a), |d, x| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    });
                    send(*a, d);
                }
                Op::Relu(a) => send(*a, zip(&g, self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
                Op::Ln(a) => send(*a, zip(&g, self.value(*a), |d, x| d / x)),
                Op::MulCol(a, c) => {
                    let x = self.value(*a);
                    let col = self.value(*c);
                    let mut da = g.clone();
                    let mut dc = Matrix::zeros(col.rows(), 1);
                    for i in 0..g.rows() {
                        let s = col.get(i, 0);
                        dc.set(i, 0, dot(g.row(i), x.row(i)));
                        for v in da.row_mut(i) {
                            *v *= s;
                        }
                    }
                    send(*a, da);
                    send(*c, dc);
                }
                Op::RowDot(a, b) => {
                    let (x, z) = (self.value(*a), self.value(*b));
                    let mut da = z.clone();
                    let mut db = x.clone();
                    for i in 0..g.rows() {
                        let s = g.get(i, 0);
                        for v in da.row_mut(i) {
                            *v *= s;
                        }
                        for v in db.row_mut(i) {
                            *v *= s;
                        }
                    }
                    send(*a, da);
                    send(*b, db);
                }
                Op::Softmax(a) => {
                    let mut d = g.clone();
                    for i in 0..g.rows() {
                        let s = dot(g.row(i), y.row(i));
                        for (j, v) in d.row_mut(i).iter_mut().enumerate() {
                            *v = y.get(i, j) * (g.get(i, j) - s);
                        }
                    }
                    send(*a, d);
                }
                Op::LayerNorm(a, eps) => {
                    let x = self.value(*a);
                    let n = x.cols() as f64;
                    let mut d = g.clone();
                    for i in 0..g.rows() {
                        let (_, inv) = moments(x.row(i), *eps);
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gy = dot(gr, yr) / n;
                        for (j, v) in d.row_mut(i).iter_mut().enumerate() {
                            *v = inv * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    send(*a, d);
                }
                Op::L2Normalize(a) => {
                    let x = self.value(*a);
                    let mut d = g.clone();
                    for i in 0..g.rows() {
                        let xr = x.row(i);
                        let n = (dot(xr, xr) + NORM_EPS).sqrt();
                        let gy = dot(g.row(i), y.row(i));
                        for (j, v) in d.row_mut(i).iter_mut().enumerate() {
                            *v = (g.get(i, j) - y.get(i, j) * gy) / n;
                        }
                    }
                    send(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for i in 0..g.rows() {
                        d.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                    }
                    send(*a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut d = Matrix::zeros(g.rows(), w);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                        }
                        off += w;
                        send(p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.value(p).shape();
                        let d = Matrix::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                        off += r;
                        send(p, d);
                    }
                }
                Op::Gather(a, index) => {
                    let src = self.value(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for (i, &r) in index.iter().enumerate() {
                        for (o, v) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    send(*a, d);
                }
                Op::CrossEntropy(a, targets) => {
                    let x = self.value(*a);
                    let scale = g.data()[0] / targets.len() as f64;
                    let mut d = x.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = d.row_mut(i);
                        softmax_in_place(row);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    send(*a, d);
                }
                Op::Mean(a) => {
                    let src = self.value(*a);
                    let v = g.data()[0] / src.len() as f64;
                    send(*a, Matrix::filled(src.rows(), src.cols(), v));
                }
            }
        }
        out
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip(a, b, |x, y| x * y)
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for row in g.iter_rows() {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
