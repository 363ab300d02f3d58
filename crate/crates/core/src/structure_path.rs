//! Structure reconstruction: personalized PageRank diffusion over the observed
//! edges, per-row top-k sparsification, learned positional node features and
//! two-step propagation through the sparsified diffusion matrix.

use std::sync::Arc;

use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::nn::dropout_on;
use crate::tensor::{CsrMatrix, DenseMatrix, ParamStore, SparseOperator, Tape, Var};

pub const PE_WEIGHT: &str = "pe.weight";
pub const PE_BIAS: &str = "pe.bias";
pub const PPNP_W0: &str = "ppnp.w0";
pub const PPNP_W1: &str = "ppnp.w1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PprMethod {
    ClosedForm,
    PowerIteration,
}

impl std::str::FromStr for PprMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form" => Ok(Self::ClosedForm),
            "power_iteration" => Ok(Self::PowerIteration),
            other => Err(Error::InvalidParameter(format!("unknown PPR method `{other}`"))),
        }
    }
}

impl std::fmt::Display for PprMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ClosedForm => "closed_form",
            Self::PowerIteration => "power_iteration",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PprConfig {
    /// Reset probability.
    pub alpha: f64,
    /// Entries kept per row; `0` disables sparsification.
    pub k: usize,
    pub method: PprMethod,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PprConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            k: 20,
            method: PprMethod::ClosedForm,
            tol: 1e-8,
            max_iter: 1000,
        }
    }
}

impl PprConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::InvalidParameter(format!("tolerance {} must be positive", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(edges: &[(usize, usize)], n: usize) -> DenseMatrix {
    let mut degree = vec![1.0; n];
    for &(u, v) in edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d: &f64| 1.0 / d.sqrt()).collect();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        out.set(i, i, inv_sqrt[i] * inv_sqrt[i]);
    }
    for &(u, v) in edges {
        let w = inv_sqrt[u] * inv_sqrt[v];
        out.set(u, v, w);
        out.set(v, u, w);
    }
    out
}

fn check_square(m: &DenseMatrix, what: &'static str) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(Error::shape(what, m.shape(), (m.rows(), m.rows())));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1]")));
    }
    Ok(())
}

/// `α (I − (1−α) Â)^{-1}`.
pub fn ppr_closed_form(adj: &DenseMatrix, alpha: f64) -> Result<DenseMatrix> {
    check_square(adj, "ppr_closed_form")?;
    check_alpha(alpha)?;
    let n = adj.rows();
    let system = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - (1.0 - alpha) * adj.get(i, j)
    });
    // The system is symmetric positive definite for a symmetric-normalised Â;
    // anything else goes through LU.
    let inverse = match system.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => system
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::NonFinite("singular PPR system".into()))?,
    };
    let out = DenseMatrix::from_fn(n, n, |i, j| alpha * inverse[(i, j)]);
    if !out.is_finite() {
        return Err(Error::NonFinite("PPR closed form".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PprSolution {
    pub matrix: DenseMatrix,
    pub iterations: usize,
    /// False when `max_iter` was reached first; the matrix is still the last iterate.
    pub converged: bool,
}

/// Iterates `A ← (1−α) Â A + α I` from `A = I` until the largest entry change
/// drops below `tol` or `max_iter` steps have run.
pub fn ppr_power_iteration(adj: &DenseMatrix, alpha: f64, tol: f64, max_iter: usize) -> Result<PprSolution> {
    check_square(adj, "ppr_power_iteration")?;
    check_alpha(alpha)?;
    let n = adj.rows();
    let sparse = CsrMatrix::from_dense(adj);
    let mut current = DenseMatrix::identity(n);
    for iteration in 1..=max_iter {
        let mut next = sparse.matmul_dense(&current).scale(1.0 - alpha);
        for i in 0..n {
            next.set(i, i, next.get(i, i) + alpha);
        }
        let change = next.max_abs_diff(&current);
        current = next;
        if !change.is_finite() {
            return Err(Error::NonFinite(format!("PPR iteration {iteration}")));
        }
        if change < tol {
            return Ok(PprSolution {
                matrix: current,
                iterations: iteration,
                converged: true,
            });
        }
    }
    warn!("PPR power iteration hit max_iter = {max_iter} before reaching tol = {tol}");
    Ok(PprSolution {
        matrix: current,
        iterations: max_iter,
        converged: false,
    })
}

/// Keeps the `k` largest nonzero entries of every row and zeroes the rest.
///
/// Ties go to the smaller column index; values are not renormalised. Zero
/// entries never compete for a slot, so applying the operation twice is the
/// same as applying it once. `k = 0` returns the input unchanged, as does any
/// `k >= n`.
pub fn knn_sparsify(a: &DenseMatrix, k: usize) -> DenseMatrix {
    if k == 0 {
        return a.clone();
    }
    if k > a.cols() {
        warn!("k = {k} exceeds row length {}; keeping every entry", a.cols());
    }
    let mut out = DenseMatrix::zeros(a.rows(), a.cols());
    let mut order: Vec<usize> = Vec::with_capacity(a.cols());
    for r in 0..a.rows() {
        let row = a.row(r);
        order.clear();
        order.extend((0..row.len()).filter(|&c| row[c] != 0.0));
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
        for &c in order.iter().take(k) {
            out.set(r, c, row[c]);
        }
    }
    out
}

/// Diffusion products computed once per edge set and reused every epoch.
#[derive(Debug, Clone)]
pub struct StructureGraph {
    /// Dense diffusion matrix before sparsification.
    pub a_sr_dense: DenseMatrix,
    /// Sparsified diffusion matrix.
    pub a_sr: DenseMatrix,
    pub operator: Arc<SparseOperator>,
    pub ppr_iterations: Option<usize>,
}

pub fn reconstruct_structure(edges: &[(usize, usize)], n: usize, config: &PprConfig) -> Result<StructureGraph> {
    config.validate()?;
    let adj = normalize_adjacency(edges, n);
    let (a_sr_dense, ppr_iterations) = match config.method {
        PprMethod::ClosedForm => (ppr_closed_form(&adj, config.alpha)?, None),
        PprMethod::PowerIteration => {
            let sol = ppr_power_iteration(&adj, config.alpha, config.tol, config.max_iter)?;
            (sol.matrix, Some(sol.iterations))
        }
    };
    let a_sr = knn_sparsify(&a_sr_dense, config.k);
    let operator = Arc::new(SparseOperator::from_dense(&a_sr));
    Ok(StructureGraph {
        a_sr_dense,
        a_sr,
        operator,
        ppr_iterations,
    })
}

/// Registers the positional table (`n x h`) and the two propagation weights.
pub fn init_structure_params(
    store: &mut ParamStore,
    n: usize,
    pe_hidden: usize,
    ppnp_hidden: usize,
    d: usize,
    rng: &mut Rng,
) -> Result<()> {
    store.insert_glorot(PE_WEIGHT, n, pe_hidden, rng)?;
    store.insert_zeros(PE_BIAS, 1, pe_hidden)?;
    store.insert_glorot(PPNP_W0, pe_hidden, ppnp_hidden, rng)?;
    store.insert_glorot(PPNP_W1, ppnp_hidden, d, rng)
}

/// Positional features: one affine map applied to the `n x n` identity,
/// i.e. row `i` of the weight table plus the bias.
pub fn record_positional(tape: &mut Tape, params: &ParamStore, n: usize) -> Result<Var> {
    let w = params.value(PE_WEIGHT)?;
    let b = params.value(PE_BIAS)?;
    if w.rows() != n || b.shape() != (1, w.cols()) {
        return Err(Error::shape("positional table", w.shape(), b.shape()));
    }
    let w = tape.param(params, PE_WEIGHT)?;
    let b = tape.param(params, PE_BIAS)?;
    Ok(tape.add_row_bias(w, b))
}

pub fn positional_features(n: usize, params: &ParamStore) -> Result<DenseMatrix> {
    let mut tape = Tape::new();
    let x = record_positional(&mut tape, params, n)?;
    Ok(tape.value(x).clone())
}

/// `Â · ReLU(Â · X · W0) · W1` without bias terms.
pub fn record_ppnp(
    tape: &mut Tape,
    operator: &Arc<SparseOperator>,
    x_pe: Var,
    w0: Var,
    w1: Var,
    dropout: Option<(f64, &mut Rng)>,
) -> Var {
    // Â(XW) == (ÂX)W; multiplying by W first keeps the sparse product narrow.
    let xw = tape.matmul(x_pe, w0);
    let h = tape.sparse_matmul(operator, xw);
    let mut h = tape.relu(h);
    if let Some((rate, rng)) = dropout {
        h = dropout_on(tape, h, rate, rng);
    }
    let hw = tape.matmul(h, w1);
    tape.sparse_matmul(operator, hw)
}

pub fn ppnp_forward(a_sr: &DenseMatrix, x_pe: &DenseMatrix, w0: &DenseMatrix, w1: &DenseMatrix) -> Result<DenseMatrix> {
    check_square(a_sr, "ppnp propagation")?;
    if a_sr.rows() != x_pe.rows() {
        return Err(Error::shape("ppnp propagation vs features", a_sr.shape(), x_pe.shape()));
    }
    if x_pe.cols() != w0.rows() {
        return Err(Error::shape("ppnp features vs W0", x_pe.shape(), w0.shape()));
    }
    if w0.cols() != w1.rows() {
        return Err(Error::shape("ppnp W0 vs W1", w0.shape(), w1.shape()));
    }
    let op = Arc::new(SparseOperator::from_dense(a_sr));
    let mut tape = Tape::new();
    let x = tape.constant(x_pe.clone());
    let w0 = tape.constant(w0.clone());
    let w1 = tape.constant(w1.clone());
    let z = record_ppnp(&mut tape, &op, x, w0, w1, None);
    Ok(tape.value(z).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructurePathOut {
    pub a_sr_dense: DenseMatrix,
    pub a_sr: DenseMatrix,
    pub x_pe: DenseMatrix,
    pub z_sr: DenseMatrix,
}

/// Full structure path under fixed parameters.
pub fn structure_path(graph: &StructureGraph, params: &ParamStore) -> Result<StructurePathOut> {
    let n = graph.a_sr.rows();
    let x_pe = positional_features(n, params)?;
    let z_sr = ppnp_forward(&graph.a_sr, &x_pe, params.value(PPNP_W0)?, params.value(PPNP_W1)?)?;
    Ok(StructurePathOut {
        a_sr_dense: graph.a_sr_dense.clone(),
        a_sr: graph.a_sr.clone(),
        x_pe,
        z_sr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_small_cases() {
        assert_eq!(normalize_adjacency(&[], 1), DenseMatrix::identity(1));
        let two = normalize_adjacency(&[(0, 1)], 2);
        assert!(two.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn normalization_recovers_degrees() {
        let edges = [(0, 1), (0, 2), (1, 2), (2, 3), (4, 5), (3, 9), (7, 8), (0, 9)];
        let n = 10;
        let a = normalize_adjacency(&edges, n);
        let mut deg = vec![1.0f64; n];
        for &(u, v) in &edges {
            deg[u] += 1.0;
            deg[v] += 1.0;
        }
        for i in 0..n {
            let row: f64 = (0..n).map(|j| deg[i].sqrt() * a.get(i, j) * deg[j].sqrt()).sum();
            assert!((row - deg[i]).abs() < 1e-12);
            for j in 0..n {
                assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
    }

    #[test]
    fn closed_form_small_cases() {
        for alpha in [0.1, 0.5, 0.9] {
            let one = ppr_closed_form(&DenseMatrix::identity(1), alpha).unwrap();
            assert!((one.get(0, 0) - 1.0).abs() < 1e-14);
        }
        let a = ppr_closed_form(&normalize_adjacency(&[(0, 1)], 2), 0.5).unwrap();
        let expected = DenseMatrix::from_rows(&[[0.75, 0.25], [0.25, 0.75]]);
        assert!(a.max_abs_diff(&expected) < 1e-14);

        let adj = normalize_adjacency(&[(0, 1), (1, 2), (2, 3)], 4);
        let near = ppr_closed_form(&adj, 0.999).unwrap();
        assert!(near.max_abs_diff(&DenseMatrix::identity(4)) < 2e-3);
    }

    #[test]
    fn power_iteration_cases() {
        let adj = normalize_adjacency(&[(0, 1), (1, 2)], 3);
        let pure = ppr_power_iteration(&adj, 1.0, 1e-12, 10).unwrap();
        assert_eq!(pure.matrix, DenseMatrix::identity(3));
        assert_eq!(pure.iterations, 1);

        let two = ppr_power_iteration(&normalize_adjacency(&[(0, 1)], 2), 0.5, 1e-10, 1000).unwrap();
        let expected = DenseMatrix::from_rows(&[[0.75, 0.25], [0.25, 0.75]]);
        assert!(two.converged);
        assert!(two.matrix.max_abs_diff(&expected) < 1e-9);

        let capped = ppr_power_iteration(&adj, 0.1, 1e-14, 3).unwrap();
        assert!(!capped.converged);
        assert_eq!(capped.iterations, 3);
        assert!(ppr_power_iteration(&adj, 0.0, 1e-8, 3).is_err());
    }

    #[test]
    fn knn_examples() {
        let row = DenseMatrix::from_rows(&[[0.7, 0.2, 0.1]]);
        assert_eq!(knn_sparsify(&row, 2), DenseMatrix::from_rows(&[[0.7, 0.2, 0.0]]));
        assert_eq!(knn_sparsify(&row, 3), row);
        assert_eq!(knn_sparsify(&row, 7), row);
        assert_eq!(knn_sparsify(&row, 0), row);
        let tie = DenseMatrix::from_rows(&[[0.5, 0.3, 0.3]]);
        assert_eq!(knn_sparsify(&tie, 2), DenseMatrix::from_rows(&[[0.5, 0.3, 0.0]]));
    }

    #[test]
    fn positional_examples() {
        let mut store = ParamStore::new();
        store.insert(PE_WEIGHT, DenseMatrix::identity(4)).unwrap();
        store.insert_zeros(PE_BIAS, 1, 4).unwrap();
        assert_eq!(positional_features(4, &store).unwrap(), DenseMatrix::identity(4));

        let mut store = ParamStore::new();
        store.insert_zeros(PE_WEIGHT, 3, 2).unwrap();
        store.insert(PE_BIAS, DenseMatrix::from_rows(&[[0.5, -1.0]])).unwrap();
        let x = positional_features(3, &store).unwrap();
        for i in 0..3 {
            assert_eq!(x.row(i), &[0.5, -1.0]);
        }
        assert!(positional_features(4, &store).is_err());
    }

    #[test]
    fn ppnp_reductions() {
        let x = DenseMatrix::from_fn(3, 2, |i, j| (i as f64 - 1.0) * (j as f64 + 0.5));
        let w0 = DenseMatrix::from_rows(&[[0.5, -0.3, 1.0], [0.2, 0.8, -0.4]]);
        let w1 = DenseMatrix::from_rows(&[[1.0, 0.0], [0.5, 0.5], [-0.2, 0.3]]);
        let id = ppnp_forward(&DenseMatrix::identity(3), &x, &w0, &w1).unwrap();
        let mlp = x.matmul(&w0).unwrap().map(|v| v.max(0.0)).matmul(&w1).unwrap();
        assert!(id.max_abs_diff(&mlp) < 1e-15);
        let zero = ppnp_forward(&DenseMatrix::identity(3), &DenseMatrix::zeros(3, 2), &w0, &w1).unwrap();
        assert_eq!(zero, DenseMatrix::zeros(3, 2));
        assert!(ppnp_forward(&DenseMatrix::identity(2), &x, &w0, &w1).is_err());
        assert!(ppnp_forward(&DenseMatrix::identity(3), &x, &w1, &w0).is_err());
    }
}
