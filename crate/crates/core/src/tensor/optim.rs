use std::collections::BTreeMap;

use super::matrix::DenseMatrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Sgd,
    /// Adaptive first/second moments with bias correction.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub method: Method,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            method: Method::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            method: Method::Sgd,
            ..Self::adam(learning_rate, weight_decay)
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Zero is accepted so that a frozen run is expressible.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::InvalidParameter("invalid moment coefficients".into()));
        }
        Ok(())
    }
}

struct Moments {
    first: DenseMatrix,
    second: DenseMatrix,
}

/// Applies accumulated gradients to a [`ParamStore`] and clears them.
pub struct Optimizer {
    config: OptimConfig,
    step: u32,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// One update of every parameter; gradients are zeroed afterwards.
    ///
    /// Parameters are left untouched if any update would be non-finite.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let mut updates: Vec<(String, DenseMatrix)> = Vec::with_capacity(params.len());
        for (name, p) in params.iter() {
            let g = p.grad.zip_map(&p.value, |g, v| g + c.weight_decay * v);
            let next = match c.method {
                Method::Sgd => p.value.zip_map(&g, |v, g| v - c.learning_rate * g),
                Method::Adam => {
                    let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                        first: DenseMatrix::zeros(g.rows(), g.cols()),
                        second: DenseMatrix::zeros(g.rows(), g.cols()),
                    });
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    let mut next = p.value.clone();
                    for (((v, &gi), m1), m2) in next
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.first.data_mut())
                        .zip(m.second.data_mut())
                    {
                        *m1 = c.beta1 * *m1 + (1.0 - c.beta1) * gi;
                        *m2 = c.beta2 * *m2 + (1.0 - c.beta2) * gi * gi;
                        let m_hat = *m1 / bc1;
                        let v_hat = *m2 / bc2;
                        *v -= c.learning_rate * m_hat / (v_hat.sqrt() + c.eps);
                    }
                    next
                }
            };
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("update of `{name}`")));
            }
            updates.push((name.to_string(), next));
        }
        for (name, value) in updates {
            params.get_mut(&name)?.value = value;
        }
        params.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", DenseMatrix::filled(1, 1, value)).unwrap();
        s.get_mut("p").unwrap().grad = DenseMatrix::filled(1, 1, grad);
        s
    }

    #[test]
    fn sgd_one_step() {
        let mut s = single(1.0, 0.5);
        Optimizer::new(OptimConfig::sgd(0.1, 0.0)).unwrap().step(&mut s).unwrap();
        assert!((s.value("p").unwrap().get(0, 0) - 0.95).abs() < 1e-15);
        assert_eq!(s.grad("p").unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        for cfg in [OptimConfig::sgd(0.1, 0.0), OptimConfig::adam(0.1, 0.0)] {
            let mut s = single(0.37, 0.0);
            Optimizer::new(cfg).unwrap().step(&mut s).unwrap();
            assert_eq!(s.value("p").unwrap().get(0, 0), 0.37);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let lr = 0.01;
        let mut s = ParamStore::new();
        s.insert("p", DenseMatrix::filled(2, 3, 0.5)).unwrap();
        s.get_mut("p").unwrap().grad = DenseMatrix::filled(2, 3, 1.0);
        Optimizer::new(OptimConfig::adam(lr, 0.0)).unwrap().step(&mut s).unwrap();
        // m_hat = 1, v_hat = 1 at t = 1.
        let expected = 0.5 - lr / (1.0 + 1e-8);
        for &v in s.value("p").unwrap().data() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut s = single(2.0, 3.0);
        Optimizer::new(OptimConfig::adam(0.0, 0.1)).unwrap().step(&mut s).unwrap();
        assert_eq!(s.value("p").unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn non_finite_update_is_rejected() {
        let mut s = single(1.0, f64::INFINITY);
        let err = Optimizer::new(OptimConfig::sgd(0.1, 0.0)).unwrap().step(&mut s);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(s.value("p").unwrap().get(0, 0), 1.0);
        assert!(Optimizer::new(OptimConfig::sgd(-1.0, 0.0)).is_err());
    }
}
