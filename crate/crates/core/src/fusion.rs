//! Per-node attention over the two reconstructed feature views.
//!
//! Each view's row is projected, scored against a learned vector and squashed
//! with `tanh`; a two-way softmax over the two scores gives the node's mixing
//! weights, and the fused row is the weighted sum of the two view rows.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{DenseMatrix, ParamStore, Tape, Var};

/// Parameter names for one fusion head.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub proj_f_weight: String,
    pub proj_f_bias: String,
    pub score_f: String,
    pub proj_s_weight: String,
    pub proj_s_bias: String,
    pub score_s: String,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            proj_f_weight: "fusion.proj_f.weight".into(),
            proj_f_bias: "fusion.proj_f.bias".into(),
            score_f: "fusion.score_f".into(),
            proj_s_weight: "fusion.proj_s.weight".into(),
            proj_s_bias: "fusion.proj_s.bias".into(),
            score_s: "fusion.score_s".into(),
        }
    }
}

impl FusionParams {
    /// The same head with the roles of the two views exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            proj_f_weight: self.proj_s_weight.clone(),
            proj_f_bias: self.proj_s_bias.clone(),
            score_f: self.score_s.clone(),
            proj_s_weight: self.proj_f_weight.clone(),
            proj_s_bias: self.proj_f_bias.clone(),
            score_s: self.score_f.clone(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, d: usize, attention_dim: usize, rng: &mut Rng) -> Result<()> {
        store.insert_glorot(&self.proj_f_weight, d, attention_dim, rng)?;
        store.insert_zeros(&self.proj_f_bias, 1, attention_dim)?;
        store.insert_glorot(&self.score_f, attention_dim, 1, rng)?;
        store.insert_glorot(&self.proj_s_weight, d, attention_dim, rng)?;
        store.insert_zeros(&self.proj_s_bias, 1, attention_dim)?;
        store.insert_glorot(&self.score_s, attention_dim, 1, rng)
    }

    fn check(&self, store: &ParamStore, d: usize) -> Result<()> {
        for (w, b, s) in [
            (&self.proj_f_weight, &self.proj_f_bias, &self.score_f),
            (&self.proj_s_weight, &self.proj_s_bias, &self.score_s),
        ] {
            let (w, b, s) = (store.value(w)?.shape(), store.value(b)?.shape(), store.value(s)?.shape());
            if w.0 != d || b != (1, w.1) || s != (w.1, 1) {
                return Err(Error::Shape {
                    context: "fusion head",
                    left: format!("d={d}"),
                    right: format!("proj {w:?}, bias {b:?}, score {s:?}"),
                });
            }
        }
        Ok(())
    }

    fn score(&self, tape: &mut Tape, store: &ParamStore, x: Var, feature_side: bool) -> Result<Var> {
        let (w, b, s) = if feature_side {
            (&self.proj_f_weight, &self.proj_f_bias, &self.score_f)
        } else {
            (&self.proj_s_weight, &self.proj_s_bias, &self.score_s)
        };
        let w = tape.param(store, w)?;
        let b = tape.param(store, b)?;
        let s = tape.param(store, s)?;
        let proj = tape.matmul(x, w);
        let proj = tape.add_row_bias(proj, b);
        let logit = tape.matmul(proj, s);
        Ok(tape.tanh(logit))
    }

    /// Records the fused features and the `n x 2` weight matrix.
    pub fn record(&self, tape: &mut Tape, store: &ParamStore, x_fr: Var, z_sr: Var) -> Result<(Var, Var)> {
        let (xs, zs) = (tape.shape(x_fr), tape.shape(z_sr));
        if xs != zs {
            return Err(Error::shape("fusion views", xs, zs));
        }
        self.check(store, xs.1)?;
        let gamma_f = self.score(tape, store, x_fr, true)?;
        let gamma_s = self.score(tape, store, z_sr, false)?;
        let both = tape.concat_cols(gamma_f, gamma_s);
        let weights = tape.row_softmax(both);
        let w_f = tape.column(weights, 0);
        let w_s = tape.column(weights, 1);
        let a = tape.row_scale(x_fr, w_f);
        let b = tape.row_scale(z_sr, w_s);
        Ok((tape.add(a, b), weights))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOut {
    pub x_hat: DenseMatrix,
    /// Column 0 weighs the feature view, column 1 the structure view.
    pub weights: DenseMatrix,
}

pub fn attention_fuse(x_fr: &DenseMatrix, z_sr: &DenseMatrix, names: &FusionParams, store: &ParamStore) -> Result<FusionOut> {
    let mut tape = Tape::new();
    let x = tape.constant(x_fr.clone());
    let z = tape.constant(z_sr.clone());
    let (x_hat, weights) = names.record(&mut tape, store, x, z)?;
    Ok(FusionOut {
        x_hat: tape.value(x_hat).clone(),
        weights: tape.value(weights).clone(),
    })
}
