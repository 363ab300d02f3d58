//! Layer building blocks shared by the reconstruction and classification models.

use rand::Rng as _;

use super::matrix::DenseMatrix;
use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Parameter names of a two-layer perceptron registered under `prefix`.
#[derive(Debug, Clone)]
pub struct Mlp2 {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl Mlp2 {
    pub fn new(prefix: &str) -> Self {
        Self {
            w1: format!("{prefix}.w1"),
            b1: format!("{prefix}.b1"),
            w2: format!("{prefix}.w2"),
            b2: format!("{prefix}.b2"),
        }
    }

    /// Registers Glorot weights and zero biases for an `input -> hidden -> output` stack.
    pub fn init(
        &self,
        store: &mut ParamStore,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        store.insert_glorot(&self.w1, input, hidden, rng)?;
        store.insert_zeros(&self.b1, 1, hidden)?;
        store.insert_glorot(&self.w2, hidden, output, rng)?;
        store.insert_zeros(&self.b2, 1, output)
    }

    /// Checks that `W1(a×h), b1(1×h), W2(h×b), b2(1×b)` chain from an input of width `input`.
    pub fn check_shapes(&self, store: &ParamStore, input: usize) -> Result<(usize, usize)> {
        let w1 = store.value(&self.w1)?.shape();
        let b1 = store.value(&self.b1)?.shape();
        let w2 = store.value(&self.w2)?.shape();
        let b2 = store.value(&self.b2)?.shape();
        if w1.0 != input {
            return Err(Error::shape("mlp input vs W1", (0, input), w1));
        }
        if b1 != (1, w1.1) {
            return Err(Error::shape("mlp W1 vs b1", w1, b1));
        }
        if w2.0 != w1.1 {
            return Err(Error::shape("mlp W1 vs W2", w1, w2));
        }
        if b2 != (1, w2.1) {
            return Err(Error::shape("mlp W2 vs b2", w2, b2));
        }
        Ok((w1.1, w2.1))
    }

    /// `ReLU(x·W1 + b1)·W2 + b2`, with optional inverted dropout after the hidden activation.
    pub fn record(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dropout: Option<(f64, &mut Rng)>,
    ) -> Result<Var> {
        let w1 = tape.param(store, &self.w1)?;
        let b1 = tape.param(store, &self.b1)?;
        let w2 = tape.param(store, &self.w2)?;
        let b2 = tape.param(store, &self.b2)?;
        let h = tape.matmul(x, w1);
        let h = tape.add_row_bias(h, b1);
        let mut h = tape.relu(h);
        if let Some((rate, rng)) = dropout {
            h = dropout_on(tape, h, rate, rng);
        }
        let y = tape.matmul(h, w2);
        Ok(tape.add_row_bias(y, b2))
    }
}

/// Evaluates the two-layer perceptron stored under `prefix` on `x`.
pub fn mlp2_forward(params: &ParamStore, prefix: &str, x: &DenseMatrix) -> Result<DenseMatrix> {
    let mlp = Mlp2::new(prefix);
    mlp.check_shapes(params, x.cols())?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = mlp.record(&mut tape, params, xv, None)?;
    Ok(tape.value(y).clone())
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
pub fn dropout_on(tape: &mut Tape, x: Var, rate: f64, rng: &mut Rng) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let (r, c) = tape.shape(x);
    let keep = 1.0 - rate;
    let factors = DenseMatrix::from_fn(r, c, |_, _| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
    tape.mask_mul(x, factors)
}

/// Records the `n x m` matrix of cosine similarities between rows of `u` and rows of `v`.
pub fn cosine_on(tape: &mut Tape, u: Var, v: Var) -> Var {
    let un = tape.row_normalize(u);
    let vn = tape.row_normalize(v);
    tape.matmul_transpose_b(un, vn)
}

/// `S[i][j] = <u_i, v_j> / (max(|u_i|, 1e-12) · max(|v_j|, 1e-12))`.
pub fn cosine_matrix(u: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    if u.cols() != v.cols() {
        return Err(Error::shape("cosine_matrix", u.shape(), v.shape()));
    }
    let mut tape = Tape::new();
    let uv = tape.constant(u.clone());
    let vv = tape.constant(v.clone());
    let s = cosine_on(&mut tape, uv, vv);
    Ok(tape.value(s).clone())
}
