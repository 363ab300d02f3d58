//! Self-supervised reconstruction phase: both paths are trained jointly on the
//! masked graph under the dual contrastive loss, without any label.

use std::sync::Arc;

use log::debug;

use crate::error::{Error, Result};
use crate::feature_path::{init_imputer, record_decoder, record_imputation};
use crate::graph::GraphDataset;
use crate::objective::{record_info_nce, ContrastiveConfig, LossParts};
use crate::rng::{stream, Rng, Stream};
use crate::structure_path::{
    init_structure_params, record_positional, record_ppnp, reconstruct_structure, PprConfig, StructureGraph, PPNP_W0,
    PPNP_W1,
};
use crate::tensor::{DenseMatrix, OptimConfig, Optimizer, ParamStore, SparseOperator, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct UgclConfig {
    pub ppr: PprConfig,
    pub contrastive: ContrastiveConfig,
    pub imputer_hidden: usize,
    /// Width of the positional table.
    pub pe_hidden: usize,
    pub ppnp_hidden: usize,
    pub optim: OptimConfig,
    pub dropout: f64,
    pub epochs: usize,
}

impl Default for UgclConfig {
    fn default() -> Self {
        Self {
            ppr: PprConfig::default(),
            contrastive: ContrastiveConfig::default(),
            imputer_hidden: 128,
            pe_hidden: 512,
            ppnp_hidden: 128,
            optim: OptimConfig::adam(0.01, 0.0),
            dropout: 0.0,
            epochs: 200,
        }
    }
}

impl UgclConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppr.validate()?;
        self.contrastive.validate()?;
        self.optim.validate()?;
        if self.imputer_hidden == 0 || self.pe_hidden == 0 || self.ppnp_hidden == 0 {
            return Err(Error::InvalidParameter("hidden widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Fixed inputs of the reconstruction objective.
#[derive(Debug, Clone)]
pub struct ReconInputs {
    pub features: DenseMatrix,
    pub mask: Arc<Vec<bool>>,
    pub structure: StructureGraph,
}

impl ReconInputs {
    pub fn new(ds: &GraphDataset, ppr: &PprConfig) -> Result<Self> {
        Ok(Self {
            features: ds.features().clone(),
            mask: Arc::new(ds.feature_mask().to_vec()),
            structure: reconstruct_structure(ds.edges(), ds.n(), ppr)?,
        })
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }
}

/// Fresh parameters for both reconstruction paths.
pub fn init_recon_params(n: usize, d: usize, config: &UgclConfig, seed: u64) -> Result<ParamStore> {
    let mut rng = stream(seed, Stream::ReconInit);
    let mut store = ParamStore::new();
    init_imputer(&mut store, d, config.imputer_hidden, &mut rng)?;
    init_structure_params(&mut store, n, config.pe_hidden, config.ppnp_hidden, d, &mut rng)?;
    Ok(store)
}

/// Handles to the nodes of one recorded forward pass.
pub struct Recorded {
    pub loss: Var,
    pub feature_loss: Var,
    pub structure_loss: Var,
    pub x_fr: Var,
    pub a_fr: Var,
    pub x_pe: Var,
    pub z_sr: Var,
}

/// Records both paths and the dual loss. Dropout applies only when an RNG is given.
pub fn record_recon(
    tape: &mut Tape,
    store: &ParamStore,
    inputs: &ReconInputs,
    config: &UgclConfig,
    mut dropout: Option<&mut Rng>,
) -> Result<Recorded> {
    let n = inputs.n();
    let w1 = store.value(PPNP_W1)?;
    if w1.cols() != inputs.d() {
        return Err(Error::shape("propagation output vs feature width", w1.shape(), inputs.features.shape()));
    }
    if inputs.structure.a_sr.rows() != n {
        return Err(Error::shape("structure vs features", inputs.structure.a_sr.shape(), inputs.features.shape()));
    }
    let rate = config.dropout;
    let x_fr = record_imputation(
        tape,
        store,
        &inputs.features,
        &inputs.mask,
        dropout.as_deref_mut().map(|r| (rate, r)),
    )?;
    let a_fr = record_decoder(tape, x_fr);

    let x_pe = record_positional(tape, store, n)?;
    let w0 = tape.param(store, PPNP_W0)?;
    let w1 = tape.param(store, PPNP_W1)?;
    let z_sr = record_ppnp(
        tape,
        &inputs.structure.operator,
        x_pe,
        w0,
        w1,
        dropout.map(|r| (rate, r)),
    );

    let t = config.contrastive.temperature;
    let feature_loss = record_info_nce(tape, x_fr, z_sr, t);
    let a_sr = tape.constant(inputs.structure.a_sr.clone());
    let structure_loss = record_info_nce(tape, a_fr, a_sr, t);
    let loss = tape.add(feature_loss, structure_loss);
    Ok(Recorded {
        loss,
        feature_loss,
        structure_loss,
        x_fr,
        a_fr,
        x_pe,
        z_sr,
    })
}

fn parts(tape: &Tape, rec: &Recorded) -> LossParts {
    LossParts {
        feature: tape.scalar(rec.feature_loss),
        structure: tape.scalar(rec.structure_loss),
        total: tape.scalar(rec.loss),
    }
}

/// Loss under `store` without dropout; the function finite differences probe.
pub fn recon_loss(store: &ParamStore, inputs: &ReconInputs, config: &UgclConfig) -> Result<LossParts> {
    let mut tape = Tape::new();
    let rec = record_recon(&mut tape, store, inputs, config, None)?;
    Ok(parts(&tape, &rec))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub feature: f64,
    pub structure: f64,
    pub total: f64,
}

/// Everything the reconstruction phase produces.
#[derive(Debug, Clone)]
pub struct ReconState {
    pub x_fr: DenseMatrix,
    pub a_fr: DenseMatrix,
    pub a_sr_dense: DenseMatrix,
    pub a_sr: DenseMatrix,
    pub propagation: Arc<SparseOperator>,
    pub x_pe: DenseMatrix,
    pub z_sr: DenseMatrix,
    pub params: ParamStore,
    /// Training-mode loss of every epoch, before that epoch's update.
    pub history: Vec<EpochLoss>,
    /// Loss without dropout under the initial parameters.
    pub initial_loss: LossParts,
    /// Loss without dropout under the returned parameters.
    pub final_loss: LossParts,
}

fn check_finite(p: &LossParts, epoch: usize) -> Result<()> {
    if !p.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "reconstruction loss at epoch {epoch} (feature {}, structure {})",
            p.feature, p.structure
        )));
    }
    Ok(())
}

/// Initialises both paths, trains them for `config.epochs` epochs and returns
/// the reconstructions under the final parameters. The diffusion matrix is
/// computed once from the observed edges and stays fixed.
pub fn run_ugcl(ds: &GraphDataset, config: &UgclConfig, seed: u64) -> Result<ReconState> {
    config.validate()?;
    let inputs = ReconInputs::new(ds, &config.ppr)?;
    let mut store = init_recon_params(ds.n(), ds.d(), config, seed)?;
    let mut optimizer = Optimizer::new(config.optim)?;
    let mut dropout_rng = stream(seed, Stream::ReconDropout);

    let initial_loss = recon_loss(&store, &inputs, config)?;
    check_finite(&initial_loss, 0)?;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut tape = Tape::new();
        let rng = (config.dropout > 0.0).then_some(&mut dropout_rng);
        let rec = record_recon(&mut tape, &store, &inputs, config, rng)?;
        let p = parts(&tape, &rec);
        check_finite(&p, epoch)?;
        history.push(EpochLoss {
            epoch,
            feature: p.feature,
            structure: p.structure,
            total: p.total,
        });
        tape.backward(rec.loss, &mut store)?;
        optimizer
            .step(&mut store)
            .map_err(|e| e.context(format!("reconstruction update at epoch {epoch}")))?;
        if epoch % 50 == 0 {
            debug!("ugcl epoch {epoch}: feature {:.5} structure {:.5}", p.feature, p.structure);
        }
    }

    let mut tape = Tape::new();
    let rec = record_recon(&mut tape, &store, &inputs, config, None)?;
    let final_loss = parts(&tape, &rec);
    check_finite(&final_loss, config.epochs)?;
    Ok(ReconState {
        x_fr: tape.value(rec.x_fr).clone(),
        a_fr: tape.value(rec.a_fr).clone(),
        x_pe: tape.value(rec.x_pe).clone(),
        z_sr: tape.value(rec.z_sr).clone(),
        a_sr_dense: inputs.structure.a_sr_dense,
        a_sr: inputs.structure.a_sr,
        propagation: inputs.structure.operator,
        params: store,
        history,
        initial_loss,
        final_loss,
    })
}
