//! Dual contrastive objective between the two reconstruction paths.
//!
//! Both terms are InfoNCE over cosine similarities: node `i` of one view is the
//! positive for node `i` of the other, every other node is a negative.

use crate::error::{Error, Result};
use crate::pipeline::ReconState;
use crate::tensor::nn::cosine_on;
use crate::tensor::{DenseMatrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveConfig {
    pub temperature: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { temperature: 0.5 }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Records `-Σ_i log softmax_j(cos(u_i, v_j) / t)[i]`.
pub fn record_info_nce(tape: &mut Tape, anchors: Var, candidates: Var, temperature: f64) -> Var {
    let sim = cosine_on(tape, anchors, candidates);
    let logits = tape.scale(sim, 1.0 / temperature);
    let log_probs = tape.row_log_softmax(logits);
    let positives = tape.diagonal(log_probs);
    let total = tape.sum_all(positives);
    tape.scale(total, -1.0)
}

fn info_nce(anchors: &DenseMatrix, candidates: &DenseMatrix, temperature: f64, what: &'static str) -> Result<f64> {
    ContrastiveConfig { temperature }.validate()?;
    if anchors.shape() != candidates.shape() {
        return Err(Error::shape(what, anchors.shape(), candidates.shape()));
    }
    if !anchors.is_finite() || !candidates.is_finite() {
        return Err(Error::NonFinite(format!("{what} input")));
    }
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let c = tape.constant(candidates.clone());
    let loss = record_info_nce(&mut tape, a, c, temperature);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(value)
}

/// Feature-level term between completed features and propagated representations.
pub fn feature_contrastive_loss(x_fr: &DenseMatrix, z_sr: &DenseMatrix, temperature: f64) -> Result<f64> {
    info_nce(x_fr, z_sr, temperature, "feature contrastive loss")
}

/// Structure-level term between decoded and diffused adjacency rows.
pub fn structure_contrastive_loss(a_fr: &DenseMatrix, a_sr: &DenseMatrix, temperature: f64) -> Result<f64> {
    info_nce(a_fr, a_sr, temperature, "structure contrastive loss")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub feature: f64,
    pub structure: f64,
    pub total: f64,
}

/// Both terms evaluated on the outputs held in `state`.
pub fn total_loss(state: &ReconState, temperature: f64) -> Result<LossParts> {
    let feature = feature_contrastive_loss(&state.x_fr, &state.z_sr, temperature)?;
    let structure = structure_contrastive_loss(&state.a_fr, &state.a_sr, temperature)?;
    Ok(LossParts {
        feature,
        structure,
        total: feature + structure,
    })
}
