//! Two-layer graph-convolution classifier trained on the fused features, and
//! the plain GCN baselines that share its training loop.

use std::sync::Arc;

use log::debug;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{attention_fuse, FusionOut, FusionParams};
use crate::graph::{GraphDataset, Splits};
use crate::pipeline::ReconState;
use crate::rng::{stream, Rng, Stream};
use crate::structure_path::normalize_adjacency;
use crate::tensor::nn::dropout_on;
use crate::tensor::tape::log_sum_exp;
use crate::tensor::{DenseMatrix, OptimConfig, Optimizer, ParamStore, SparseOperator, Tape, Var};

pub const GCN_WA: &str = "gcn.w_a";
pub const GCN_WB: &str = "gcn.w_b";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownstreamConfig {
    pub hidden: usize,
    pub attention_dim: usize,
    pub optim: OptimConfig,
    pub dropout: f64,
    pub max_epochs: usize,
    /// Epochs without a new best checkpoint before stopping.
    pub patience: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            attention_dim: 64,
            optim: OptimConfig::adam(0.01, 5e-4),
            dropout: 0.5,
            max_epochs: 500,
            patience: 100,
        }
    }
}

impl DownstreamConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.hidden == 0 || self.attention_dim == 0 {
            return Err(Error::InvalidParameter("classifier widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidParameter(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidParameter("max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Registers `W_a (d×hidden)` and `W_b (hidden×classes)`.
pub fn init_gcn(store: &mut ParamStore, d: usize, hidden: usize, classes: usize, rng: &mut Rng) -> Result<()> {
    store.insert_glorot(GCN_WA, d, hidden, rng)?;
    store.insert_glorot(GCN_WB, hidden, classes, rng)
}

fn check_gcn(store: &ParamStore, n: usize, prop_n: (usize, usize), d: usize) -> Result<()> {
    let wa = store.value(GCN_WA)?.shape();
    let wb = store.value(GCN_WB)?.shape();
    if prop_n != (n, n) {
        return Err(Error::shape("propagation vs features", prop_n, (n, d)));
    }
    if wa.0 != d {
        return Err(Error::shape("features vs W_a", (n, d), wa));
    }
    if wb.0 != wa.1 {
        return Err(Error::shape("W_a vs W_b", wa, wb));
    }
    Ok(())
}

/// Records `P · ReLU(P · X · W_a) · W_b`.
pub fn record_gcn(
    tape: &mut Tape,
    store: &ParamStore,
    prop: &Arc<SparseOperator>,
    x: Var,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<Var> {
    let (n, d) = tape.shape(x);
    let m = prop.matrix();
    check_gcn(store, n, (m.rows(), m.cols()), d)?;
    let wa = tape.param(store, GCN_WA)?;
    let wb = tape.param(store, GCN_WB)?;
    let xw = tape.matmul(x, wa);
    let h = tape.sparse_matmul(prop, xw);
    let mut h = tape.relu(h);
    if let Some((rate, rng)) = dropout {
        h = dropout_on(tape, h, rate, rng);
    }
    let hw = tape.matmul(h, wb);
    Ok(tape.sparse_matmul(prop, hw))
}

/// Logits of the classifier under `store`.
pub fn gcn_forward(prop: &DenseMatrix, x_hat: &DenseMatrix, store: &ParamStore) -> Result<DenseMatrix> {
    check_gcn(store, x_hat.rows(), prop.shape(), x_hat.cols())?;
    let h = prop.matmul(x_hat)?.matmul(store.value(GCN_WA)?)?.map(|v| v.max(0.0));
    prop.matmul(&h)?.matmul(store.value(GCN_WB)?)
}

/// `D^{-1/2} S D^{-1/2}` with `S = max(A, Aᵀ)`. Rows with zero degree stay zero.
pub fn symmetric_propagation(a: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != a.cols() {
        return Err(Error::shape("propagation matrix must be square", a.shape(), a.shape()));
    }
    let n = a.rows();
    let s = DenseMatrix::from_fn(n, n, |i, j| a.get(i, j).max(a.get(j, i)));
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = s.row(i).iter().sum();
            if deg > 0.0 {
                deg.sqrt().recip()
            } else {
                0.0
            }
        })
        .collect();
    Ok(DenseMatrix::from_fn(n, n, |i, j| inv_sqrt[i] * s.get(i, j) * inv_sqrt[j]))
}

/// Fraction of `split` nodes whose highest logit is their label; ties go to
/// the smaller class index.
pub fn evaluate(logits: &DenseMatrix, labels: &[Option<usize>], split: &[usize]) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::InvalidParameter("cannot evaluate on an empty split".into()));
    }
    if labels.len() != logits.rows() {
        return Err(Error::Shape {
            context: "labels vs logits",
            left: format!("{} labels", labels.len()),
            right: format!("{}x{}", logits.rows(), logits.cols()),
        });
    }
    let mut pairs = Vec::with_capacity(split.len());
    for &i in split {
        let label = labels
            .get(i)
            .copied()
            .flatten()
            .ok_or_else(|| Error::InvalidDataset(format!("node {i} in split has no label")))?;
        pairs.push((i, label));
    }
    Ok(accuracy(logits, &pairs))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

fn cross_entropy(logits: &DenseMatrix, pairs: &[(usize, usize)]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|&(i, c)| log_sum_exp(logits.row(i)) - logits.get(i, c))
        .sum();
    total / pairs.len() as f64
}

fn accuracy(logits: &DenseMatrix, pairs: &[(usize, usize)]) -> f64 {
    let hits = pairs.iter().filter(|&&(i, c)| argmax(logits.row(i)) == c).count();
    hits as f64 / pairs.len() as f64
}

/// The only labels fitting code sees: `(node, class)` pairs of the training
/// and validation nodes.
#[derive(Debug, Clone)]
pub struct TrainingLabels {
    train: Arc<Vec<(usize, usize)>>,
    val: Vec<(usize, usize)>,
    num_classes: usize,
}

impl TrainingLabels {
    pub fn from_splits(labels: &[Option<usize>], num_classes: usize, splits: &Splits) -> Result<Self> {
        let pick = |nodes: &[usize], what: &str| -> Result<Vec<(usize, usize)>> {
            nodes
                .iter()
                .map(|&i| match labels.get(i).copied().flatten() {
                    Some(c) if c < num_classes => Ok((i, c)),
                    _ => Err(Error::InvalidDataset(format!("{what} node {i} has no usable label"))),
                })
                .collect()
        };
        let train = pick(&splits.train, "train")?;
        if train.is_empty() {
            return Err(Error::InvalidParameter("empty train split".into()));
        }
        let val = pick(&splits.val, "validation")?;
        if val.is_empty() {
            return Err(Error::InvalidParameter("empty validation split".into()));
        }
        Ok(Self {
            train: Arc::new(train),
            val,
            num_classes,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub seed: u64,
    pub config_digest: String,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Training cross-entropy per epoch, measured with dropout active.
    pub loss_curve: Vec<f64>,
}

/// Input views of one downstream session.
#[derive(Debug, Clone)]
pub enum Views {
    /// Fuse the two reconstructed views with a trainable attention head.
    Fused { x_fr: DenseMatrix, z_sr: DenseMatrix },
    /// Feed one feature matrix directly.
    Plain(DenseMatrix),
}

impl Views {
    fn dims(&self) -> Result<(usize, usize)> {
        match self {
            Views::Fused { x_fr, z_sr } => {
                if x_fr.shape() != z_sr.shape() {
                    return Err(Error::shape("fusion views", x_fr.shape(), z_sr.shape()));
                }
                Ok(x_fr.shape())
            }
            Views::Plain(x) => Ok(x.shape()),
        }
    }

    fn record(&self, tape: &mut Tape, store: &ParamStore, fusion: &FusionParams) -> Result<Var> {
        match self {
            Views::Fused { x_fr, z_sr } => {
                let f = tape.constant(x_fr.clone());
                let s = tape.constant(z_sr.clone());
                Ok(fusion.record(tape, store, f, s)?.0)
            }
            Views::Plain(x) => Ok(tape.constant(x.clone())),
        }
    }
}

/// Result of fitting before test evaluation.
#[derive(Debug, Clone)]
pub struct Fit {
    /// Parameters at the best validation epoch.
    pub params: ParamStore,
    /// Eval-mode logits under `params`.
    pub logits: DenseMatrix,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub loss_curve: Vec<f64>,
}

/// Trains the (optional) fusion head and the classifier jointly by masked
/// cross-entropy on the training nodes and keeps the parameters of the epoch
/// with the highest validation accuracy, ties going to the lower validation
/// cross-entropy. Fusion and classifier draw their
/// initial values from separate random streams, so the classifier starts
/// from the same point whether or not a fusion head is present.
pub fn fit(
    views: &Views,
    propagation: &DenseMatrix,
    labels: &TrainingLabels,
    config: &DownstreamConfig,
    seed: u64,
) -> Result<Fit> {
    config.validate()?;
    let (n, d) = views.dims()?;
    if propagation.shape() != (n, n) {
        return Err(Error::shape("propagation vs features", propagation.shape(), (n, d)));
    }
    let prop = Arc::new(SparseOperator::from_dense(propagation));
    let fusion = FusionParams::default();
    let mut store = ParamStore::new();
    if matches!(views, Views::Fused { .. }) {
        fusion.init(&mut store, d, config.attention_dim, &mut stream(seed, Stream::FusionInit))?;
    }
    init_gcn(
        &mut store,
        d,
        config.hidden,
        labels.num_classes,
        &mut stream(seed, Stream::ClassifierInit),
    )?;
    let mut optimizer = Optimizer::new(config.optim)?;
    let mut dropout_rng = stream(seed, Stream::ClassifierDropout);

    let eval = |store: &ParamStore| -> Result<DenseMatrix> {
        let mut tape = Tape::new();
        let x = views.record(&mut tape, store, &fusion)?;
        let logits = record_gcn(&mut tape, store, &prop, x, None)?;
        Ok(tape.value(logits).clone())
    };

    let mut loss_curve = Vec::new();
    let mut best: Option<(f64, f64, usize, ParamStore, DenseMatrix)> = None;
    let mut since_best = 0;
    for epoch in 0..config.max_epochs {
        let mut tape = Tape::new();
        let x = views.record(&mut tape, &store, &fusion)?;
        let rng = (config.dropout > 0.0).then_some((config.dropout, &mut dropout_rng));
        let logits = record_gcn(&mut tape, &store, &prop, x, rng)?;
        let log_probs = tape.row_log_softmax(logits);
        let loss = tape.nll_mean(log_probs, &labels.train);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("classifier loss at epoch {epoch}")));
        }
        loss_curve.push(value);
        tape.backward(loss, &mut store)?;
        optimizer
            .step(&mut store)
            .map_err(|e| e.context(format!("classifier update at epoch {epoch}")))?;

        let logits = eval(&store)?;
        let val = accuracy(&logits, &labels.val);
        let val_loss = cross_entropy(&logits, &labels.val);
        if best.as_ref().is_none_or(|b| val > b.0 || (val == b.0 && val_loss < b.1)) {
            best = Some((val, val_loss, epoch, store.clone(), logits));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let epochs_run = loss_curve.len();
    let (val_accuracy, _, best_epoch, params, logits) = best.expect("at least one epoch runs");
    debug!("downstream: best epoch {best_epoch} of {epochs_run}, val {val_accuracy:.4}");
    Ok(Fit {
        train_accuracy: accuracy(&logits, &labels.train),
        val_accuracy,
        best_epoch,
        epochs_run,
        loss_curve,
        params,
        logits,
    })
}

/// A finished downstream run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub metrics: Metrics,
    pub fit: Fit,
    /// Fused features and weights at the kept epoch, when a fusion head was trained.
    pub fusion: Option<FusionOut>,
}

fn finish(fit: Fit, ds: &GraphDataset, splits: &Splits, seed: u64) -> Result<Outcome> {
    let test_accuracy = evaluate(&fit.logits, ds.labels(), &splits.test)?;
    Ok(Outcome {
        metrics: Metrics {
            seed,
            config_digest: String::new(),
            train_accuracy: fit.train_accuracy,
            val_accuracy: fit.val_accuracy,
            test_accuracy,
            best_epoch: fit.best_epoch,
            epochs_run: fit.epochs_run,
            loss_curve: fit.loss_curve.clone(),
        },
        fit,
        fusion: None,
    })
}

/// Fuses `x_fr` and `z_sr`, trains fusion and classifier over `propagation`,
/// then scores the test split.
pub fn train_on_views(
    ds: &GraphDataset,
    x_fr: &DenseMatrix,
    z_sr: &DenseMatrix,
    propagation: &DenseMatrix,
    splits: &Splits,
    config: &DownstreamConfig,
    seed: u64,
) -> Result<Outcome> {
    let labels = TrainingLabels::from_splits(ds.labels(), ds.num_classes(), splits)?;
    let views = Views::Fused {
        x_fr: x_fr.clone(),
        z_sr: z_sr.clone(),
    };
    let fit = fit(&views, propagation, &labels, config, seed)?;
    let fused = attention_fuse(x_fr, z_sr, &FusionParams::default(), &fit.params)?;
    let mut outcome = finish(fit, ds, splits, seed)?;
    outcome.fusion = Some(fused);
    Ok(outcome)
}

/// Downstream phase after reconstruction: the classifier propagates over the
/// symmetrised, normalised sparsified diffusion matrix.
pub fn train_downstream(
    ds: &GraphDataset,
    recon: &ReconState,
    splits: &Splits,
    config: &DownstreamConfig,
    seed: u64,
) -> Result<Outcome> {
    let propagation = symmetric_propagation(&recon.a_sr)?;
    train_on_views(ds, &recon.x_fr, &recon.z_sr, &propagation, splits, config, seed)
}

/// Plain GCN over the dataset's stored features and observed edges, with the
/// usual `(A + I)` normalisation. Hidden entries are zeros in storage, so on a
/// masked dataset this is the zero-fill baseline.
pub fn train_baseline_gcn(ds: &GraphDataset, splits: &Splits, config: &DownstreamConfig, seed: u64) -> Result<Outcome> {
    let labels = TrainingLabels::from_splits(ds.labels(), ds.num_classes(), splits)?;
    let propagation = normalize_adjacency(ds.edges(), ds.n());
    let fit = fit(&Views::Plain(ds.features().clone()), &propagation, &labels, config, seed)?;
    finish(fit, ds, splits, seed)
}
