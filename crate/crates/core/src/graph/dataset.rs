use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const FEATURES_FILE: &str = "features.tsv";
pub const EDGES_FILE: &str = "edges.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const MASK_FILE: &str = "mask.tsv";
pub const META_FILE: &str = "meta.json";

/// Attributed undirected graph with partially observed features.
///
/// Unobserved feature entries are stored as `0.0`. Edges are unordered pairs
/// kept as `(u, v)` with `u < v`, sorted, without duplicates or self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    features: DenseMatrix,
    feature_mask: Vec<bool>,
    edges: Vec<(usize, usize)>,
    labels: Vec<Option<usize>>,
    num_classes: usize,
}

/// Counts recorded next to the tsv files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub d: usize,
    pub num_classes: usize,
}

impl GraphDataset {
    /// Validates and canonicalises the parts of a dataset.
    ///
    /// Edges may be given in either orientation; masked feature entries are zeroed.
    pub fn new(
        features: DenseMatrix,
        feature_mask: Vec<bool>,
        edges: Vec<(usize, usize)>,
        labels: Vec<Option<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if feature_mask.len() != features.rows() * features.cols() {
            return Err(Error::InvalidDataset(format!(
                "feature mask has {} entries, features have {}",
                feature_mask.len(),
                features.rows() * features.cols()
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidDataset("non-finite feature value".into()));
        }
        if labels.len() != n {
            return Err(Error::InvalidDataset(format!("{} labels for {n} nodes", labels.len())));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidDataset(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &edges {
            if a >= n || b >= n {
                return Err(Error::InvalidDataset(format!("edge ({a}, {b}) outside [0, {n})")));
            }
            if a == b {
                return Err(Error::InvalidDataset(format!("self-loop at node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::InvalidDataset(format!("duplicate edge ({a}, {b})")));
            }
        }
        let mut features = features;
        for (v, &m) in features.data_mut().iter_mut().zip(&feature_mask) {
            if !m {
                *v = 0.0;
            }
        }
        Ok(Self {
            features,
            feature_mask,
            edges: seen.into_iter().collect(),
            labels,
            num_classes,
        })
    }

    /// Dataset whose every feature entry is observed.
    pub fn fully_observed(
        features: DenseMatrix,
        edges: Vec<(usize, usize)>,
        labels: Vec<Option<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        let mask = vec![true; features.rows() * features.cols()];
        Self::new(features, mask, edges, labels, num_classes)
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    /// Row-major observation flags, `true` = observed.
    pub fn feature_mask(&self) -> &[bool] {
        &self.feature_mask
    }

    pub fn is_observed(&self, node: usize, dim: usize) -> bool {
        self.feature_mask[node * self.d() + dim]
    }

    pub fn observed_count(&self) -> usize {
        self.feature_mask.iter().filter(|&&m| m).count()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(Option::is_some)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            n: self.n(),
            d: self.d(),
            num_classes: self.num_classes,
        }
    }

    pub(crate) fn with_observations(&self, features: DenseMatrix, mask: Vec<bool>, edges: Vec<(usize, usize)>) -> Self {
        Self {
            features,
            feature_mask: mask,
            edges,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}

/// Reads a dataset directory (`features.tsv`, `edges.tsv`, optional
/// `labels.tsv`, `mask.tsv` and `meta.json`).
///
/// Lines that are blank or start with `#` are ignored. Without `mask.tsv`
/// every entry is observed.
pub fn load_dataset(dir: &Path) -> Result<GraphDataset> {
    let manifest: Option<Manifest> = match read_optional(&dir.join(META_FILE))? {
        Some(text) => Some(
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidDataset(format!("{}: {e}", dir.join(META_FILE).display())))?,
        ),
        None => None,
    };

    let features_text = read_required(&dir.join(FEATURES_FILE))?;
    let (features, _) = parse_node_rows(FEATURES_FILE, &features_text, |s| s.parse::<f64>().ok().filter(|v| v.is_finite()))?;
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if let Some(m) = manifest {
        if m.n != n || m.d != d {
            return Err(Error::InvalidDataset(format!(
                "manifest declares n={} d={}, {FEATURES_FILE} has n={n} d={d}",
                m.n, m.d
            )));
        }
    }

    let mask = match read_optional(&dir.join(MASK_FILE))? {
        Some(text) => {
            let (rows, lines) = parse_node_rows(MASK_FILE, &text, |s| match s {
                "0" => Some(false),
                "1" => Some(true),
                _ => None,
            })?;
            if rows.len() != n {
                return Err(parse_err(MASK_FILE, lines, format!("{} rows, expected {n}", rows.len())));
            }
            if rows.iter().any(|r| r.len() != d) {
                return Err(parse_err(MASK_FILE, lines, format!("mask width differs from feature width {d}")));
            }
            rows.into_iter().flatten().collect()
        }
        None => vec![true; n * d],
    };

    let edges = parse_edges(&read_required(&dir.join(EDGES_FILE))?, n)?;

    let (labels, num_classes) = match read_optional(&dir.join(LABELS_FILE))? {
        Some(text) => parse_labels(&text, n)?,
        None => (vec![None; n], 0),
    };
    let num_classes = match manifest {
        Some(m) if m.num_classes < num_classes => {
            return Err(Error::InvalidDataset(format!(
                "manifest declares {} classes but labels reach {}",
                m.num_classes,
                num_classes - 1
            )))
        }
        Some(m) => m.num_classes,
        None => num_classes,
    };

    let data = features.into_iter().flatten().collect();
    GraphDataset::new(DenseMatrix::new(n, d, data)?, mask, edges, labels, num_classes)
}

/// Writes the canonical on-disk form; `load_dataset` reads it back exactly.
pub fn write_dataset(ds: &GraphDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut features = String::new();
    let mut mask = String::new();
    for i in 0..ds.n() {
        write!(features, "{i}").unwrap();
        write!(mask, "{i}").unwrap();
        for j in 0..ds.d() {
            write!(features, "\t{}", ds.features().get(i, j)).unwrap();
            mask.push_str(if ds.is_observed(i, j) { "\t1" } else { "\t0" });
        }
        features.push('\n');
        mask.push('\n');
    }
    let mut edges = String::new();
    for &(u, v) in ds.edges() {
        writeln!(edges, "{u}\t{v}").unwrap();
    }
    write_file(&dir.join(FEATURES_FILE), &features)?;
    write_file(&dir.join(MASK_FILE), &mask)?;
    write_file(&dir.join(EDGES_FILE), &edges)?;
    if ds.has_labels() {
        let mut labels = String::new();
        for (i, l) in ds.labels().iter().enumerate() {
            if let Some(c) = l {
                writeln!(labels, "{i}\t{c}").unwrap();
            }
        }
        write_file(&dir.join(LABELS_FILE), &labels)?;
    }
    let meta = serde_json::to_string_pretty(&ds.manifest()).expect("manifest serializes");
    write_file(&dir.join(META_FILE), &(meta + "\n"))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_required(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_optional(path: &Path) -> Result<Option<String>> {
    match fs::read_to_string(path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

/// Data lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn parse_id(file: &str, line: usize, token: Option<&str>, n: Option<usize>) -> Result<usize> {
    let token = token.ok_or_else(|| parse_err(file, line, "missing node id"))?;
    let id: usize = token
        .trim()
        .parse()
        .map_err(|_| parse_err(file, line, format!("invalid node id `{token}`")))?;
    if let Some(n) = n {
        if id >= n {
            return Err(parse_err(file, line, format!("node id {id} out of range (n = {n})")));
        }
    }
    Ok(id)
}

/// Parses `id<TAB>v1<TAB>...` rows into a dense table indexed by id.
/// Returns the rows and the last line number seen.
fn parse_node_rows<T: Clone>(
    file: &str,
    text: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<(Vec<Vec<T>>, usize)> {
    let mut rows: Vec<Option<Vec<T>>> = Vec::new();
    let mut width = None;
    let mut last_line = 0;
    for (line, content) in data_lines(text) {
        last_line = line;
        let mut tokens = content.split('\t');
        let id = parse_id(file, line, tokens.next(), None)?;
        let values = tokens
            .map(|t| parse(t.trim()).ok_or_else(|| parse_err(file, line, format!("invalid value `{t}`"))))
            .collect::<Result<Vec<T>>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(parse_err(file, line, format!("expected {w} values, found {}", values.len())))
            }
            _ => {}
        }
        if id >= rows.len() {
            rows.resize(id + 1, None);
        }
        if rows[id].is_some() {
            return Err(parse_err(file, line, format!("node {id} listed twice")));
        }
        rows[id] = Some(values);
    }
    let n = rows.len();
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| parse_err(file, last_line, format!("node {i} missing (ids must cover 0..{n})"))))
        .collect::<Result<Vec<_>>>()
        .map(|r| (r, last_line))
}

fn parse_edges(text: &str, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut seen = BTreeSet::new();
    for (line, content) in data_lines(text) {
        let mut tokens = content.split('\t');
        let u = parse_id(EDGES_FILE, line, tokens.next(), Some(n))?;
        let v = parse_id(EDGES_FILE, line, tokens.next(), Some(n))?;
        if tokens.next().is_some() {
            return Err(parse_err(EDGES_FILE, line, "expected exactly two node ids"));
        }
        if u == v {
            return Err(parse_err(EDGES_FILE, line, format!("self-loop at node {u}")));
        }
        if !seen.insert((u.min(v), u.max(v))) {
            return Err(parse_err(EDGES_FILE, line, format!("duplicate edge {u}-{v}")));
        }
    }
    Ok(seen.into_iter().collect())
}

fn parse_labels(text: &str, n: usize) -> Result<(Vec<Option<usize>>, usize)> {
    let mut labels = vec![None; n];
    let mut classes = 0;
    for (line, content) in data_lines(text) {
        let mut tokens = content.split('\t');
        let node = parse_id(LABELS_FILE, line, tokens.next(), Some(n))?;
        let class_token = tokens
            .next()
            .ok_or_else(|| parse_err(LABELS_FILE, line, "missing class id"))?;
        let class: usize = class_token
            .trim()
            .parse()
            .map_err(|_| parse_err(LABELS_FILE, line, format!("invalid class `{class_token}`")))?;
        if tokens.next().is_some() {
            return Err(parse_err(LABELS_FILE, line, "expected node and class"));
        }
        if labels[node].replace(class).is_some() {
            return Err(parse_err(LABELS_FILE, line, format!("node {node} labelled twice")));
        }
        classes = classes.max(class + 1);
    }
    Ok((labels, classes))
}
