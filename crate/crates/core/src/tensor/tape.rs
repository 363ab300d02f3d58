//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records one forward evaluation as a flat list of nodes, each
//! holding its value and the operation that produced it. Parents always have
//! smaller indices than their children, so a single reverse sweep visits every
//! node after all of its consumers. The operation set is closed: it contains
//! exactly what the reconstruction objective, the fusion head and the
//! downstream classifier need.
//!
//! Parameters enter the tape by name through [`Tape::param`]; [`Tape::backward`]
//! consumes the tape and accumulates gradients into the owning [`ParamStore`].
//! Constants (inputs, fixed propagation operators) never receive gradients.
//! Shape errors inside the tape are programming errors and panic; the public
//! model entry points validate shapes before recording.

use std::sync::Arc;

use super::matrix::{dot, DenseMatrix};
use super::params::ParamStore;
use super::sparse::CsrMatrix;
use crate::error::{Error, Result};

/// Floor applied to row norms before division.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A fixed sparse matrix together with its transpose, for use as the left
/// factor of a product on the tape.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    forward: CsrMatrix,
    transpose: CsrMatrix,
}

impl SparseOperator {
    pub fn new(matrix: CsrMatrix) -> Self {
        let transpose = matrix.transpose();
        Self {
            forward: matrix,
            transpose,
        }
    }

    pub fn from_dense(dense: &DenseMatrix) -> Self {
        Self::new(CsrMatrix::from_dense(dense))
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.forward
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    SparseMatMul(Arc<SparseOperator>, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    RowNormalize(Var),
    Select {
        mask: Arc<Vec<bool>>,
        on_true: Var,
        on_false: Var,
    },
    Diagonal(Var),
    SumAll(Var),
    ConcatCols(Var, Var),
    Column(Var, usize),
    RowScale(Var, Var),
    MaskMul(Var, DenseMatrix),
    NllMean(Var, Arc<Vec<(usize, usize)>>),
}

struct Node {
    value: DenseMatrix,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Recording of one forward evaluation.
#[derive(Default)]
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

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.get(0, 0)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records the current value of a named parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    fn push(&mut self, value: DenseMatrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul_transpose_b(self.value(b))
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulTransB(a, b), rg)
    }

    /// `op · x` for a fixed sparse `op`.
    pub fn sparse_matmul(&mut self, op: &Arc<SparseOperator>, x: Var) -> Var {
        let value = op.forward.matmul_dense(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::SparseMatMul(Arc::clone(op), x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds the `1 x m` row `bias` to every row of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a single row");
        assert_eq!(b.cols(), self.value(x).cols(), "bias width mismatch");
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            for (o, &bv) in value.row_mut(r).iter_mut().zip(b.row(0)) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(value, Op::AddRowBias(x, bias), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(x);
        self.push(value, Op::RowSoftmax(x), rg)
    }

    pub fn row_log_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        self.push(value, Op::RowLogSoftmax(x), rg)
    }

    /// Divides each row by `max(‖row‖, NORM_EPS)`.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = dot(row, row).sqrt().max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let rg = self.rg(x);
        self.push(value, Op::RowNormalize(x), rg)
    }

    /// Entrywise `mask ? on_true : on_false`, mask in row-major order.
    pub fn select(&mut self, mask: &Arc<Vec<bool>>, on_true: Var, on_false: Var) -> Var {
        let (t, f) = (self.value(on_true), self.value(on_false));
        assert_eq!(t.shape(), f.shape(), "select shape mismatch");
        assert_eq!(mask.len(), t.rows() * t.cols(), "select mask length");
        let data = mask
            .iter()
            .zip(t.data().iter().zip(f.data()))
            .map(|(&m, (&a, &b))| if m { a } else { b })
            .collect();
        let value = DenseMatrix::new(t.rows(), t.cols(), data).unwrap();
        let rg = self.rg(on_true) || self.rg(on_false);
        self.push(
            value,
            Op::Select {
                mask: Arc::clone(mask),
                on_true,
                on_false,
            },
            rg,
        )
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diagonal(&mut self, x: Var) -> Var {
        let m = self.value(x);
        assert_eq!(m.rows(), m.cols(), "diagonal of non-square matrix");
        let value = DenseMatrix::from_fn(m.rows(), 1, |i, _| m.get(i, i));
        let rg = self.rg(x);
        self.push(value, Op::Diagonal(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = DenseMatrix::filled(1, 1, self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.rows(), mb.rows(), "concat_cols row mismatch");
        let (ca, cb) = (ma.cols(), mb.cols());
        let value = DenseMatrix::from_fn(ma.rows(), ca + cb, |i, j| {
            if j < ca {
                ma.get(i, j)
            } else {
                mb.get(i, j - ca)
            }
        });
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    pub fn column(&mut self, x: Var, c: usize) -> Var {
        let m = self.value(x);
        assert!(c < m.cols(), "column index out of range");
        let value = DenseMatrix::from_fn(m.rows(), 1, |i, _| m.get(i, c));
        let rg = self.rg(x);
        self.push(value, Op::Column(x, c), rg)
    }

    /// Scales row `i` of `x` by `w[i]`, with `w` an `n x 1` column.
    pub fn row_scale(&mut self, x: Var, w: Var) -> Var {
        let (mx, mw) = (self.value(x), self.value(w));
        assert_eq!(mw.shape(), (mx.rows(), 1), "row_scale weight shape");
        let value = DenseMatrix::from_fn(mx.rows(), mx.cols(), |i, j| mx.get(i, j) * mw.get(i, 0));
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::RowScale(x, w), rg)
    }

    /// Elementwise product with a constant factor matrix (dropout masks).
    pub fn mask_mul(&mut self, x: Var, factors: DenseMatrix) -> Var {
        let value = self.value(x).zip_map(&factors, |a, b| a * b);
        let rg = self.rg(x);
        self.push(value, Op::MaskMul(x, factors), rg)
    }

    /// Mean of `-x[row][class]` over `targets`; `x` holds log-probabilities.
    pub fn nll_mean(&mut self, log_probs: Var, targets: &Arc<Vec<(usize, usize)>>) -> Var {
        assert!(!targets.is_empty(), "nll over empty target set");
        let m = self.value(log_probs);
        let total: f64 = targets.iter().map(|&(r, c)| -m.get(r, c)).sum();
        let value = DenseMatrix::filled(1, 1, total / targets.len() as f64);
        let rg = self.rg(log_probs);
        self.push(value, Op::NllMean(log_probs, Arc::clone(targets)), rg)
    }

    /// Back-propagates from the scalar `loss`, accumulating into `store`.
    ///
    /// Consumes the tape, so a recording cannot be replayed twice.
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::shape("backward on non-scalar", shape, (1, 1)));
        }
        self.backward_from(loss, DenseMatrix::filled(1, 1, 1.0), store)
    }

    /// Back-propagates an arbitrary seed gradient from `output`.
    pub fn backward_from(self, output: Var, seed: DenseMatrix, store: &mut ParamStore) -> Result<()> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward seed", seed.shape(), self.shape(output)));
        }
        if !seed.is_finite() {
            return Err(Error::NonFinite("backward seed".into()));
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(name) = &node.param {
                store.get_mut(name)?.grad.add_assign(&g);
                continue;
            }
            let mut emit = |v: Var, contribution: DenseMatrix| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        emit(*a, g.matmul_transpose_b_unchecked(val(*b)));
                    }
                    if self.rg(*b) {
                        emit(*b, val(*a).transpose_matmul_unchecked(&g));
                    }
                }
                Op::MatMulTransB(a, b) => {
                    if self.rg(*a) {
                        emit(*a, g.matmul_unchecked(val(*b)));
                    }
                    if self.rg(*b) {
                        emit(*b, g.transpose_matmul_unchecked(val(*a)));
                    }
                }
                Op::SparseMatMul(op, x) => emit(*x, op.transpose.matmul_dense(&g)),
                Op::Add(a, b) => {
                    emit(*a, g.clone());
                    emit(*b, g);
                }
                Op::AddRowBias(x, bias) => {
                    if self.rg(*bias) {
                        let mut gb = DenseMatrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (o, &v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        emit(*bias, gb);
                    }
                    emit(*x, g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        emit(*a, g.zip_map(val(*b), |u, w| u * w));
                    }
                    if self.rg(*b) {
                        emit(*b, g.zip_map(val(*a), |u, w| u * w));
                    }
                }
                Op::Scale(x, c) => emit(*x, g.scale(*c)),
                Op::Relu(x) => emit(*x, g.zip_map(val(*x), |u, xv| if xv > 0.0 { u } else { 0.0 })),
                Op::Sigmoid(x) => emit(*x, g.zip_map(&node.value, |u, y| u * y * (1.0 - y))),
                Op::Tanh(x) => emit(*x, g.zip_map(&node.value, |u, y| u * (1.0 - y * y))),
                Op::RowSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = dot(g.row(r), y.row(r));
                        for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - inner);
                        }
                    }
                    emit(*x, gx);
                }
                Op::RowLogSoftmax(x) => {
                    let y = &node.value;
                    let mut gx = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    emit(*x, gx);
                }
                Op::RowNormalize(x) => {
                    let (xin, y) = (val(*x), &node.value);
                    let mut gx = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let raw = dot(xin.row(r), xin.row(r)).sqrt();
                        let norm = raw.max(NORM_EPS);
                        let proj = if raw > NORM_EPS { dot(y.row(r), g.row(r)) } else { 0.0 };
                        for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gv - yv * proj) / norm;
                        }
                    }
                    emit(*x, gx);
                }
                Op::Select {
                    mask,
                    on_true,
                    on_false,
                } => {
                    if self.rg(*on_true) {
                        let data = mask
                            .iter()
                            .zip(g.data())
                            .map(|(&m, &v)| if m { v } else { 0.0 })
                            .collect();
                        emit(*on_true, DenseMatrix::new(g.rows(), g.cols(), data).unwrap());
                    }
                    if self.rg(*on_false) {
                        let data = mask
                            .iter()
                            .zip(g.data())
                            .map(|(&m, &v)| if m { 0.0 } else { v })
                            .collect();
                        emit(*on_false, DenseMatrix::new(g.rows(), g.cols(), data).unwrap());
                    }
                }
                Op::Diagonal(x) => {
                    let n = g.rows();
                    let mut gx = DenseMatrix::zeros(n, n);
                    for i in 0..n {
                        gx.set(i, i, g.get(i, 0));
                    }
                    emit(*x, gx);
                }
                Op::SumAll(x) => {
                    let (r, c) = val(*x).shape();
                    emit(*x, DenseMatrix::filled(r, c, g.get(0, 0)));
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).cols();
                    let cb = val(*b).cols();
                    emit(*a, DenseMatrix::from_fn(g.rows(), ca, |i, j| g.get(i, j)));
                    emit(*b, DenseMatrix::from_fn(g.rows(), cb, |i, j| g.get(i, ca + j)));
                }
                Op::Column(x, c) => {
                    let (r, cols) = val(*x).shape();
                    let mut gx = DenseMatrix::zeros(r, cols);
                    for i in 0..r {
                        gx.set(i, *c, g.get(i, 0));
                    }
                    emit(*x, gx);
                }
                Op::RowScale(x, w) => {
                    let (mx, mw) = (val(*x), val(*w));
                    if self.rg(*w) {
                        emit(*w, DenseMatrix::from_fn(mx.rows(), 1, |i, _| dot(g.row(i), mx.row(i))));
                    }
                    if self.rg(*x) {
                        emit(*x, DenseMatrix::from_fn(mx.rows(), mx.cols(), |i, j| g.get(i, j) * mw.get(i, 0)));
                    }
                }
                Op::MaskMul(x, factors) => emit(*x, g.zip_map(factors, |u, f| u * f)),
                Op::NllMean(x, targets) => {
                    let (r, c) = val(*x).shape();
                    let mut gx = DenseMatrix::zeros(r, c);
                    let w = g.get(0, 0) / targets.len() as f64;
                    for &(row, class) in targets.iter() {
                        gx.set(row, class, gx.get(row, class) - w);
                    }
                    emit(*x, gx);
                }
            }
        }
        Ok(())
    }
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

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_transpose_times_ones() {
        let x = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, -1.0], [0.5, 0.0]]);
        let mut store = ParamStore::new();
        store
            .insert("w", DenseMatrix::from_rows(&[[0.3, -0.2, 1.0], [0.7, 0.1, -0.4]]))
            .unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.param(&store, "w").unwrap();
        let y = tape.matmul(xv, w);
        let loss = tape.sum_all(y);
        tape.backward(loss, &mut store).unwrap();
        let expected = x.transpose().matmul(&DenseMatrix::filled(3, 3, 1.0)).unwrap();
        assert_eq!(store.grad("w").unwrap(), &expected);
    }

    #[test]
    fn unreachable_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", DenseMatrix::filled(2, 2, 1.5)).unwrap();
        store.insert("unused", DenseMatrix::filled(2, 2, 3.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "used").unwrap();
        let _b = tape.param(&store, "unused").unwrap();
        let s = tape.sigmoid(a);
        let loss = tape.sum_all(s);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("unused").unwrap(), &DenseMatrix::zeros(2, 2));
        assert!(store.grad("used").unwrap().max_abs() > 0.0);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", DenseMatrix::zeros(2, 2)).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        assert!(tape.backward(w, &mut store).is_err());
    }

    #[test]
    fn log_softmax_is_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(DenseMatrix::from_rows(&[[1000.0, 0.0], [-1000.0, -1000.0]]));
        let y = tape.row_log_softmax(x);
        let v = tape.value(y);
        assert!(v.is_finite());
        assert!((v.get(1, 0) - (0.5f64).ln()).abs() < 1e-12);
        assert_eq!(v.get(0, 0), 0.0);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for x in [-40.0, -2.0, 0.0, 0.5, 30.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
