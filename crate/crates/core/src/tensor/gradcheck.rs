//! Central finite differences, the reference against which tape gradients are checked.

use std::collections::BTreeMap;

use super::matrix::DenseMatrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

/// `(L(p + eps) - L(p - eps)) / (2 eps)` for every entry of every parameter.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &ParamStore, eps: f64) -> Result<BTreeMap<String, DenseMatrix>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let (rows, cols) = params.value(&name)?.shape();
        let mut grad = DenseMatrix::zeros(rows, cols);
        for idx in 0..rows * cols {
            let original = params.value(&name)?.data()[idx];
            probe.get_mut(&name)?.value.data_mut()[idx] = original + eps;
            let plus = loss_fn(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[idx] = original - eps;
            let minus = loss_fn(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss while probing `{name}`[{idx}]")));
            }
            grad.data_mut()[idx] = (plus - minus) / (2.0 * eps);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative: f64,
    pub max_absolute_small: f64,
    pub worst: Option<String>,
}

impl GradCheck {
    /// Relative error `|a - f| / max(|a|, |f|)` is used where the analytic value
    /// is at least `small`; below that only the absolute error is tracked.
    pub fn compare(analytic: &ParamStore, numeric: &BTreeMap<String, DenseMatrix>, small: f64) -> Result<Self> {
        let mut check = GradCheck {
            max_relative: 0.0,
            max_absolute_small: 0.0,
            worst: None,
        };
        for (name, fd) in numeric {
            let an = analytic.grad(name)?;
            if an.shape() != fd.shape() {
                return Err(Error::shape("gradient comparison", an.shape(), fd.shape()));
            }
            for (idx, (&a, &f)) in an.data().iter().zip(fd.data()).enumerate() {
                let abs = (a - f).abs();
                if a.abs() < small {
                    check.max_absolute_small = check.max_absolute_small.max(abs);
                } else {
                    let rel = abs / a.abs().max(f.abs());
                    if rel > check.max_relative {
                        check.max_relative = rel;
                        check.worst = Some(format!("{name}[{idx}]: analytic {a:e} numeric {f:e}"));
                    }
                }
            }
        }
        Ok(check)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut store = ParamStore::new();
        store.insert("p", DenseMatrix::filled(1, 1, 3.0)).unwrap();
        let g = finite_diff_grad(|s| Ok(s.value("p")?.get(0, 0).powi(2)), &store, 1e-5).unwrap();
        assert!((g["p"].get(0, 0) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("a", DenseMatrix::filled(2, 2, 1.0)).unwrap();
        store.insert("b", DenseMatrix::filled(1, 3, -1.0)).unwrap();
        let g = finite_diff_grad(|_| Ok(4.2), &store, 1e-5).unwrap();
        assert!(g.values().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("a", DenseMatrix::filled(1, 1, 1.0)).unwrap();
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &store, 1e-5).is_err());
    }
}
