//! Feature reconstruction: a two-layer perceptron fills in unobserved
//! attributes, and an inner-product decoder derives a dense structure view
//! from the completed features.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{DenseMatrix, Mlp2, ParamStore, Tape, Var};

/// Parameter prefix of the imputer network.
pub const IMPUTER: &str = "imputer";

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePathOut {
    /// Completed features; equal to the input wherever the entry was observed.
    pub x_fr: DenseMatrix,
    /// `σ(x_fr · x_frᵀ)`.
    pub a_fr: DenseMatrix,
}

/// Registers a `d -> hidden -> d` imputer.
pub fn init_imputer(store: &mut ParamStore, d: usize, hidden: usize, rng: &mut Rng) -> Result<()> {
    Mlp2::new(IMPUTER).init(store, d, hidden, d, rng)
}

fn check_imputer(features: &DenseMatrix, mask: &[bool], params: &ParamStore) -> Result<()> {
    if mask.len() != features.rows() * features.cols() {
        return Err(Error::Shape {
            context: "feature mask",
            left: format!("{} entries", mask.len()),
            right: format!("{}x{}", features.rows(), features.cols()),
        });
    }
    let (_, out) = Mlp2::new(IMPUTER).check_shapes(params, features.cols())?;
    if out != features.cols() {
        return Err(Error::shape("imputer output", (features.rows(), out), features.shape()));
    }
    Ok(())
}

/// Records the completed feature matrix.
///
/// The imputer runs over every zero-filled row in one batch; the merge then
/// keeps observed entries verbatim and takes the network output elsewhere, so
/// fully observed rows pass through and observed entries send no gradient
/// into the imputer.
pub fn record_imputation(
    tape: &mut Tape,
    params: &ParamStore,
    features: &DenseMatrix,
    mask: &Arc<Vec<bool>>,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    check_imputer(features, mask, params)?;
    let x = tape.constant(features.clone());
    let predicted = Mlp2::new(IMPUTER).record(tape, params, x, dropout)?;
    Ok(tape.select(mask, x, predicted))
}

/// Records `σ(x · xᵀ)` with the logistic `σ`.
pub fn record_decoder(tape: &mut Tape, x_fr: Var) -> Var {
    let logits = tape.matmul_transpose_b(x_fr, x_fr);
    tape.sigmoid(logits)
}

/// Completes `features` using the imputer stored in `params`.
pub fn impute_features(features: &DenseMatrix, feature_mask: &[bool], params: &ParamStore) -> Result<DenseMatrix> {
    let mask = Arc::new(feature_mask.to_vec());
    let mut tape = Tape::new();
    let x_fr = record_imputation(&mut tape, params, features, &mask, None)?;
    Ok(tape.value(x_fr).clone())
}

/// Inner-product decoder over completed features.
pub fn decode_structure(x_fr: &DenseMatrix) -> Result<DenseMatrix> {
    if !x_fr.is_finite() {
        return Err(Error::NonFinite("decoder input".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_fr.clone());
    let a = record_decoder(&mut tape, x);
    Ok(tape.value(a).clone())
}

pub fn feature_path(features: &DenseMatrix, feature_mask: &[bool], params: &ParamStore) -> Result<FeaturePathOut> {
    let x_fr = impute_features(features, feature_mask, params)?;
    let a_fr = decode_structure(&x_fr)?;
    Ok(FeaturePathOut { x_fr, a_fr })
}
