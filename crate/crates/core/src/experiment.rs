//! Experiment driver: flat key=value configuration, (missing rate, seed) sweep
//! cells on a bounded worker pool, and the report files they produce.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::downstream::{train_baseline_gcn, train_downstream, DownstreamConfig, Metrics};
use crate::error::{Error, Result};
use crate::fusion::FusionOut;
use crate::graph::{apply_mask, load_dataset, make_splits, FeatureMaskMode, GraphDataset, MaskSpec, SplitRatios};
use crate::pipeline::{run_ugcl, EpochLoss, ReconState, UgclConfig};
use crate::structure_path::PprMethod;
use crate::tensor::{DenseMatrix, Method};

pub const RUNS_FILE: &str = "runs.csv";
pub const SUMMARY_FILE: &str = "summary.json";

/// Methods a sweep cell can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Ugcl,
    /// GCN on the masked data, hidden entries zero-filled, over observed edges.
    Gcn,
    /// GCN on the unmasked dataset.
    GcnClean,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ugcl => "ugcl",
            Self::Gcn => "gcn",
            Self::GcnClean => "gcn_clean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    pub feature_missing: Vec<f64>,
    /// Paired with `feature_missing` by position; a single value applies to every rate.
    pub edge_missing: Vec<f64>,
    pub feature_mask_mode: FeatureMaskMode,
    pub splits: SplitRatios,
    pub ugcl: UgclConfig,
    pub downstream: DownstreamConfig,
    pub seeds: Vec<u64>,
    pub run_ugcl: bool,
    pub baseline_gcn: bool,
    pub baseline_clean: bool,
    pub out: PathBuf,
    pub threads: usize,
    pub dump_embeddings: bool,
    pub dump_structure: bool,
    pub dump_fusion: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            feature_missing: vec![0.3],
            edge_missing: vec![0.3],
            feature_mask_mode: FeatureMaskMode::Entry,
            splits: SplitRatios::default(),
            ugcl: UgclConfig::default(),
            downstream: DownstreamConfig::default(),
            seeds: (0..10).collect(),
            run_ugcl: true,
            baseline_gcn: true,
            baseline_clean: false,
            out: PathBuf::from("ugcl-out"),
            threads: 1,
            dump_embeddings: false,
            dump_structure: false,
            dump_fusion: false,
        }
    }
}

/// Keys that change where or how fast results are produced, not what they are.
const OPERATIONAL_KEYS: [&str; 5] = ["out", "threads", "dump_embeddings", "dump_structure", "dump_fusion"];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidParameter(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::InvalidParameter(format!("`{key}`: expected a boolean, got `{other}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

/// `0,3,7` or the half-open range `0..10`.
fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = value.trim().split_once("..") {
        let (a, b): (u64, u64) = (parse_num("seeds", a)?, parse_num("seeds", b)?);
        return Ok((a..b).collect());
    }
    parse_list("seeds", value)
}

fn parse_method(key: &str, value: &str) -> Result<Method> {
    match value.trim() {
        "adam" => Ok(Method::Adam),
        "sgd" => Ok(Method::Sgd),
        other => Err(Error::InvalidParameter(format!("`{key}`: unknown optimizer `{other}`"))),
    }
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Adam => "adam",
        Method::Sgd => "sgd",
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "feature_missing" => self.feature_missing = parse_list(key, v)?,
            "edge_missing" => self.edge_missing = parse_list(key, v)?,
            "feature_mask_mode" => self.feature_mask_mode = v.parse()?,
            "train_ratio" => self.splits.train = parse_num(key, v)?,
            "val_ratio" => self.splits.val = parse_num(key, v)?,
            "test_ratio" => self.splits.test = parse_num(key, v)?,
            "alpha" => self.ugcl.ppr.alpha = parse_num(key, v)?,
            "k" => self.ugcl.ppr.k = parse_num(key, v)?,
            "ppr_method" => self.ugcl.ppr.method = v.parse()?,
            "ppr_tol" => self.ugcl.ppr.tol = parse_num(key, v)?,
            "ppr_max_iter" => self.ugcl.ppr.max_iter = parse_num(key, v)?,
            "temperature" => self.ugcl.contrastive.temperature = parse_num(key, v)?,
            "imputer_hidden" => self.ugcl.imputer_hidden = parse_num(key, v)?,
            "pe_hidden" => self.ugcl.pe_hidden = parse_num(key, v)?,
            "ppnp_hidden" => self.ugcl.ppnp_hidden = parse_num(key, v)?,
            "epochs" => self.ugcl.epochs = parse_num(key, v)?,
            "ugcl_optimizer" => self.ugcl.optim.method = parse_method(key, v)?,
            "ugcl_lr" => self.ugcl.optim.learning_rate = parse_num(key, v)?,
            "ugcl_weight_decay" => self.ugcl.optim.weight_decay = parse_num(key, v)?,
            "ugcl_dropout" => self.ugcl.dropout = parse_num(key, v)?,
            "gcn_hidden" => self.downstream.hidden = parse_num(key, v)?,
            "attention_dim" => self.downstream.attention_dim = parse_num(key, v)?,
            "gcn_optimizer" => self.downstream.optim.method = parse_method(key, v)?,
            "gcn_lr" => self.downstream.optim.learning_rate = parse_num(key, v)?,
            "gcn_weight_decay" => self.downstream.optim.weight_decay = parse_num(key, v)?,
            "gcn_dropout" => self.downstream.dropout = parse_num(key, v)?,
            "max_epochs" => self.downstream.max_epochs = parse_num(key, v)?,
            "patience" => self.downstream.patience = parse_num(key, v)?,
            "seeds" => self.seeds = parse_seeds(v)?,
            "ugcl" => self.run_ugcl = parse_bool(key, v)?,
            "baseline" => {
                self.baseline_gcn = false;
                self.baseline_clean = false;
                for part in v.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match part {
                        "none" => {}
                        "gcn" => self.baseline_gcn = true,
                        "clean" | "gcn_clean" => self.baseline_clean = true,
                        other => {
                            return Err(Error::InvalidParameter(format!("unknown baseline `{other}`")));
                        }
                    }
                }
            }
            "out" => self.out = PathBuf::from(v),
            "threads" => self.threads = parse_num(key, v)?,
            "dump_embeddings" => self.dump_embeddings = parse_bool(key, v)?,
            "dump_structure" => self.dump_structure = parse_bool(key, v)?,
            "dump_fusion" => self.dump_fusion = parse_bool(key, v)?,
            other => return Err(Error::UnknownParam(other.to_string())),
        }
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: "config".into(),
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            config.set(key, value).map_err(|e| Error::Parse {
                file: "config".into(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                file: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    /// Every setting in canonical order; `parse_str` of the rendered lines
    /// reproduces the configuration.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut baseline: Vec<&str> = Vec::new();
        if self.baseline_gcn {
            baseline.push("gcn");
        }
        if self.baseline_clean {
            baseline.push("clean");
        }
        if baseline.is_empty() {
            baseline.push("none");
        }
        vec![
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("feature_missing", join(&self.feature_missing)),
            ("edge_missing", join(&self.edge_missing)),
            ("feature_mask_mode", self.feature_mask_mode.to_string()),
            ("train_ratio", self.splits.train.to_string()),
            ("val_ratio", self.splits.val.to_string()),
            ("test_ratio", self.splits.test.to_string()),
            ("alpha", self.ugcl.ppr.alpha.to_string()),
            ("k", self.ugcl.ppr.k.to_string()),
            ("ppr_method", self.ugcl.ppr.method.to_string()),
            ("ppr_tol", self.ugcl.ppr.tol.to_string()),
            ("ppr_max_iter", self.ugcl.ppr.max_iter.to_string()),
            ("temperature", self.ugcl.contrastive.temperature.to_string()),
            ("imputer_hidden", self.ugcl.imputer_hidden.to_string()),
            ("pe_hidden", self.ugcl.pe_hidden.to_string()),
            ("ppnp_hidden", self.ugcl.ppnp_hidden.to_string()),
            ("epochs", self.ugcl.epochs.to_string()),
            ("ugcl_optimizer", method_name(self.ugcl.optim.method).into()),
            ("ugcl_lr", self.ugcl.optim.learning_rate.to_string()),
            ("ugcl_weight_decay", self.ugcl.optim.weight_decay.to_string()),
            ("ugcl_dropout", self.ugcl.dropout.to_string()),
            ("gcn_hidden", self.downstream.hidden.to_string()),
            ("attention_dim", self.downstream.attention_dim.to_string()),
            ("gcn_optimizer", method_name(self.downstream.optim.method).into()),
            ("gcn_lr", self.downstream.optim.learning_rate.to_string()),
            ("gcn_weight_decay", self.downstream.optim.weight_decay.to_string()),
            ("gcn_dropout", self.downstream.dropout.to_string()),
            ("max_epochs", self.downstream.max_epochs.to_string()),
            ("patience", self.downstream.patience.to_string()),
            ("seeds", join(&self.seeds)),
            ("ugcl", self.run_ugcl.to_string()),
            ("baseline", baseline.join(",")),
            ("out", self.out.display().to_string()),
            ("threads", self.threads.to_string()),
            ("dump_embeddings", self.dump_embeddings.to_string()),
            ("dump_structure", self.dump_structure.to_string()),
            ("dump_fusion", self.dump_fusion.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First 16 hex digits of SHA-256 over the result-affecting settings.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (k, v) in self.to_pairs() {
            if !OPERATIONAL_KEYS.contains(&k) {
                hasher.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hasher.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// (feature rate, edge rate) per sweep row.
    pub fn rate_pairs(&self) -> Vec<(f64, f64)> {
        let n = self.feature_missing.len().max(self.edge_missing.len());
        let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
        (0..n).map(|i| (at(&self.feature_missing, i), at(&self.edge_missing, i))).collect()
    }

    pub fn methods(&self) -> Vec<MethodKind> {
        let mut m = Vec::new();
        if self.run_ugcl {
            m.push(MethodKind::Ugcl);
        }
        if self.baseline_gcn {
            m.push(MethodKind::Gcn);
        }
        if self.baseline_clean {
            m.push(MethodKind::GcnClean);
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_missing.is_empty() || self.edge_missing.is_empty() {
            return Err(Error::InvalidParameter("at least one missing rate is required".into()));
        }
        let (f, e) = (self.feature_missing.len(), self.edge_missing.len());
        if f != e && f != 1 && e != 1 {
            return Err(Error::InvalidParameter(format!(
                "{f} feature rates cannot pair with {e} edge rates"
            )));
        }
        for (fr, er) in self.rate_pairs() {
            MaskSpec::new(fr, er, 0).validate()?;
        }
        self.splits.validate()?;
        self.ugcl.validate()?;
        self.downstream.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidParameter("no seeds".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::InvalidParameter("duplicate seeds".into()));
        }
        if self.methods().is_empty() {
            return Err(Error::InvalidParameter("no method selected".into()));
        }
        if self.threads == 0 {
            return Err(Error::InvalidParameter("threads must be positive".into()));
        }
        if self.ugcl.ppr.method == PprMethod::PowerIteration && self.ugcl.ppr.max_iter == 0 {
            return Err(Error::InvalidParameter("ppr_max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// Header line carried by every output file.
pub fn header_line(digest: &str, seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("# config_digest={digest} seed={s}"),
        None => format!("# config_digest={digest}"),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn finish_file(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `node` followed by the values of each matrix's row, tab-separated,
/// with 12 significant digits. Lines starting with `#` are headers.
pub fn export_embeddings(path: &Path, header: &str, blocks: &[&DenseMatrix]) -> Result<()> {
    let n = blocks.first().map_or(0, |m| m.rows());
    if let Some(bad) = blocks.iter().find(|m| m.rows() != n) {
        return Err(Error::shape("embedding blocks", (n, 0), bad.shape()));
    }
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for i in 0..n {
        write!(w, "{i}").map_err(io)?;
        for m in blocks {
            for v in m.row(i) {
                write!(w, "\t{v:.11e}").map_err(io)?;
            }
        }
        writeln!(w).map_err(io)?;
    }
    finish_file(w, path)
}

/// Reads a file written by [`export_embeddings`] back into one matrix of all
/// value columns, rows ordered by node id.
pub fn read_embeddings(path: &Path) -> Result<DenseMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            file: path.display().to_string(),
            line: i + 1,
            message,
        };
        let mut fields = line.split('\t');
        let node: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("missing node id".into()))?;
        let values = fields
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad value `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push((node, values));
    }
    rows.sort_by_key(|r| r.0);
    let width = rows.first().map_or(0, |r| r.1.len());
    if rows.iter().enumerate().any(|(i, r)| r.0 != i || r.1.len() != width) {
        return Err(Error::Parse {
            file: path.display().to_string(),
            line: 0,
            message: "node ids must cover 0..n with equal row widths".into(),
        });
    }
    DenseMatrix::new(rows.len(), width, rows.into_iter().flat_map(|r| r.1).collect())
}

fn write_loss_history(path: &Path, header: &str, history: &[EpochLoss]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    writeln!(w, "epoch,feature_loss,structure_loss,total_loss").map_err(io)?;
    for e in history {
        writeln!(w, "{},{},{},{}", e.epoch, e.feature, e.structure, e.total).map_err(io)?;
    }
    finish_file(w, path)
}

fn write_curve(path: &Path, header: &str, curve: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    writeln!(w, "epoch,train_loss").map_err(io)?;
    for (i, v) in curve.iter().enumerate() {
        writeln!(w, "{i},{v}").map_err(io)?;
    }
    finish_file(w, path)
}

/// Nonzero entries as `u v w` lines.
pub fn write_structure(path: &Path, header: &str, a: &DenseMatrix) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for i in 0..a.rows() {
        for (j, &v) in a.row(i).iter().enumerate() {
            if v != 0.0 {
                writeln!(w, "{i}\t{j}\t{v:.11e}").map_err(io)?;
            }
        }
    }
    finish_file(w, path)
}

/// `node, w_feature, w_structure` lines.
pub fn write_fusion_weights(path: &Path, header: &str, weights: &DenseMatrix) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    writeln!(w, "node\tw_feature\tw_structure").map_err(io)?;
    for i in 0..weights.rows() {
        writeln!(w, "{i}\t{:.11e}\t{:.11e}", weights.get(i, 0), weights.get(i, 1)).map_err(io)?;
    }
    finish_file(w, path)
}

/// One method's result inside a sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub rate_index: usize,
    pub feature_missing: f64,
    pub edge_missing: f64,
    pub method: MethodKind,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub feature_missing: f64,
    pub edge_missing: f64,
    pub method: MethodKind,
    pub runs: usize,
    pub mean_test_accuracy: f64,
    /// Sample standard deviation; zero for a single run.
    pub sd_test_accuracy: f64,
    pub mean_val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub config_digest: String,
    pub config: BTreeMap<String, String>,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub digest: String,
    pub rows: Vec<RunRow>,
    pub summary: Summary,
}

struct CellArtifacts {
    recon: ReconState,
    fusion: FusionOut,
}

struct CellResult {
    rate_index: usize,
    rates: (f64, f64),
    seed: u64,
    rows: Vec<RunRow>,
    artifacts: Option<CellArtifacts>,
    failure: Option<Error>,
}

fn run_cell(
    config: &ExperimentConfig,
    clean: &GraphDataset,
    rate_index: usize,
    rates: (f64, f64),
    seed: u64,
) -> Result<CellResult> {
    let spec = MaskSpec {
        feature_mode: config.feature_mask_mode,
        ..MaskSpec::new(rates.0, rates.1, seed)
    };
    let masked = apply_mask(clean, &spec)?;
    let splits = make_splits(&masked, config.splits, seed)?;
    let mut rows = Vec::new();
    let mut artifacts = None;
    let row = |method, metrics| RunRow {
        rate_index,
        feature_missing: rates.0,
        edge_missing: rates.1,
        method,
        metrics,
    };
    let mut failure = None;
    for method in config.methods() {
        let outcome = match method {
            MethodKind::Ugcl => run_ugcl(&masked, &config.ugcl, seed).and_then(|recon| {
                let outcome = train_downstream(&masked, &recon, &splits, &config.downstream, seed)?;
                let fusion = outcome.fusion.clone().expect("fused run");
                artifacts = Some(CellArtifacts { recon, fusion });
                Ok(outcome)
            }),
            MethodKind::Gcn => train_baseline_gcn(&masked, &splits, &config.downstream, seed),
            MethodKind::GcnClean => train_baseline_gcn(clean, &splits, &config.downstream, seed),
        };
        // One failing method does not discard the others in the same cell.
        match outcome {
            Ok(outcome) => rows.push(row(method, outcome.metrics)),
            Err(e) if failure.is_none() => failure = Some(e.context(format!("method={}", method.name()))),
            Err(_) => {}
        }
    }
    Ok(CellResult {
        rate_index,
        rates,
        seed,
        rows,
        artifacts,
        failure,
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(config: &ExperimentConfig, digest: &str, rows: &[RunRow]) -> Summary {
    let mut out = Vec::new();
    for (ri, (fr, er)) in config.rate_pairs().into_iter().enumerate() {
        for method in config.methods() {
            let sel: Vec<&RunRow> = rows.iter().filter(|r| r.rate_index == ri && r.method == method).collect();
            if sel.is_empty() {
                continue;
            }
            let test: Vec<f64> = sel.iter().map(|r| r.metrics.test_accuracy).collect();
            let val: Vec<f64> = sel.iter().map(|r| r.metrics.val_accuracy).collect();
            let (mean, sd) = mean_sd(&test);
            out.push(SummaryRow {
                feature_missing: fr,
                edge_missing: er,
                method,
                runs: sel.len(),
                mean_test_accuracy: mean,
                sd_test_accuracy: sd,
                mean_val_accuracy: mean_sd(&val).0,
            });
        }
    }
    Summary {
        config_digest: digest.to_string(),
        config: config
            .to_pairs()
            .into_iter()
            .filter(|(k, _)| !OPERATIONAL_KEYS.contains(k))
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        rows: out,
    }
}

const RUNS_HEADER: &str = "feature_missing,edge_missing,seed,method,train_accuracy,val_accuracy,test_accuracy,best_epoch,epochs_run";

fn run_line(r: &RunRow) -> String {
    let m = &r.metrics;
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.feature_missing,
        r.edge_missing,
        m.seed,
        r.method.name(),
        m.train_accuracy,
        m.val_accuracy,
        m.test_accuracy,
        m.best_epoch,
        m.epochs_run
    )
}

/// Collector side: every file is written from this one place.
struct Collector<'a> {
    config: &'a ExperimentConfig,
    digest: String,
    runs: BufWriter<File>,
    rows: Vec<RunRow>,
}

impl Collector<'_> {
    fn cell_tag(ri: usize, seed: u64) -> String {
        format!("r{ri}_s{seed}")
    }

    fn accept(&mut self, cell: CellResult) -> Result<()> {
        let out = &self.config.out;
        let tag = Self::cell_tag(cell.rate_index, cell.seed);
        let header = format!(
            "{} feature_missing={} edge_missing={}",
            header_line(&self.digest, Some(cell.seed)),
            cell.rates.0,
            cell.rates.1
        );
        for r in &cell.rows {
            let mut r = r.clone();
            r.metrics.config_digest = self.digest.clone();
            let path = out.join(format!("curve_{}_{tag}.csv", r.method.name()));
            write_curve(&path, &header, &r.metrics.loss_curve)?;
            let runs_path = out.join(RUNS_FILE);
            writeln!(self.runs, "{}", run_line(&r)).map_err(|e| Error::io(&runs_path, e))?;
            self.runs.flush().map_err(|e| Error::io(&runs_path, e))?;
            self.rows.push(r);
        }
        if let Some(a) = &cell.artifacts {
            write_loss_history(&out.join(format!("loss_{tag}.csv")), &header, &a.recon.history)?;
            if self.config.dump_embeddings {
                export_embeddings(
                    &out.join(format!("embeddings_{tag}.tsv")),
                    &format!("{header} columns=x_hat,x_fr,z_sr"),
                    &[&a.fusion.x_hat, &a.recon.x_fr, &a.recon.z_sr],
                )?;
            }
            if self.config.dump_structure {
                write_structure(&out.join(format!("structure_{tag}.tsv")), &header, &a.recon.a_sr)?;
            }
            if self.config.dump_fusion {
                write_fusion_weights(&out.join(format!("fusion_{tag}.tsv")), &header, &a.fusion.weights)?;
            }
        }
        Ok(())
    }
}

fn write_runs_sorted(path: &Path, digest: &str, rows: &[RunRow]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", header_line(digest, None)).map_err(io)?;
    writeln!(w, "{RUNS_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(w, "{}", run_line(r)).map_err(io)?;
    }
    finish_file(w, path)
}

fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::InvalidParameter(format!("serialising summary: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Runs the full sweep described by `config` on `dataset` and writes reports
/// into `config.out`.
///
/// Cells run concurrently on `config.threads` workers; results are appended to
/// the run table as they finish, so an interruption loses only cells still in
/// flight. When all cells are done the run table is rewritten in sweep order
/// and the summary is written. A failing cell does not stop the others; the
/// first failure is returned after the completed cells have been recorded.
pub fn run_experiment_on(config: &ExperimentConfig, dataset: &GraphDataset) -> Result<ExperimentReport> {
    config.validate()?;
    if !dataset.has_labels() {
        return Err(Error::InvalidDataset("experiments need node labels".into()));
    }
    let digest = config.digest();
    let out = &config.out;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("config.txt"), format!("{}\n{}", header_line(&digest, None), config.to_text()))
        .map_err(|e| Error::io(out.join("config.txt"), e))?;

    let runs_path = out.join(RUNS_FILE);
    let mut runs = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&runs_path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(&runs_path, e))?;
    writeln!(runs, "{}\n{RUNS_HEADER}", header_line(&digest, None)).map_err(|e| Error::io(&runs_path, e))?;
    let mut collector = Collector {
        config,
        digest: digest.clone(),
        runs,
        rows: Vec::new(),
    };

    let cells: Vec<(usize, (f64, f64), u64)> = config
        .rate_pairs()
        .into_iter()
        .enumerate()
        .flat_map(|(ri, rates)| config.seeds.iter().map(move |&s| (ri, rates, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;

    let (tx, rx) = mpsc::channel();
    let mut failures: Vec<Error> = Vec::new();
    std::thread::scope(|scope| {
        scope.spawn(|| {
            pool.install(|| {
                cells.par_iter().for_each_with(tx, |tx, &(ri, rates, seed)| {
                    let where_ = || format!("feature_missing={} edge_missing={} seed={seed}", rates.0, rates.1);
                    let result = run_cell(config, dataset, ri, rates, seed)
                        .map(|mut cell| {
                            cell.failure = cell.failure.take().map(|e| e.context(where_()));
                            cell
                        })
                        .map_err(|e| e.context(where_()));
                    // The receiver outlives every worker.
                    let _ = tx.send(result);
                });
            });
        });
        for result in rx {
            match result.and_then(|mut cell| {
                info!("finished rate #{} seed {}", cell.rate_index, cell.seed);
                let failure = cell.failure.take();
                collector.accept(cell)?;
                failure.map_or(Ok(()), Err)
            }) {
                Ok(()) => {}
                Err(e) => {
                    warn!("{e}");
                    failures.push(e);
                }
            }
        }
    });

    let mut rows = std::mem::take(&mut collector.rows);
    drop(collector);
    rows.sort_by(|a, b| {
        (a.rate_index, a.metrics.seed, a.method).cmp(&(b.rate_index, b.metrics.seed, b.method))
    });
    write_runs_sorted(&runs_path, &digest, &rows)?;
    let summary = summarize(config, &digest, &rows);
    write_summary(&out.join(SUMMARY_FILE), &summary)?;
    if let Some(first) = failures.into_iter().next() {
        return Err(first);
    }
    Ok(ExperimentReport { digest, rows, summary })
}

/// Loads `config.dataset` and runs the sweep.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let path = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("no dataset given".into()))?;
    let dataset = load_dataset(path)?;
    run_experiment_on(config, &dataset)
}
