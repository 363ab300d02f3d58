use rand::seq::index;

use super::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMaskMode {
    /// Individual feature entries.
    #[default]
    Entry,
    /// Whole node rows.
    Row,
}

impl std::str::FromStr for FeatureMaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entry" => Ok(Self::Entry),
            "row" => Ok(Self::Row),
            other => Err(Error::InvalidParameter(format!("unknown feature mask mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FeatureMaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Entry => "entry",
            Self::Row => "row",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub feature_missing_rate: f64,
    pub edge_missing_rate: f64,
    pub feature_mode: FeatureMaskMode,
    pub seed: u64,
}

impl MaskSpec {
    pub fn new(feature_missing_rate: f64, edge_missing_rate: f64, seed: u64) -> Self {
        Self {
            feature_missing_rate,
            edge_missing_rate,
            feature_mode: FeatureMaskMode::Entry,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, rate) in [
            ("feature missing rate", self.feature_missing_rate),
            ("edge missing rate", self.edge_missing_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidParameter(format!("{what} {rate} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `ceil(rate * total)`, treating products within 1e-9 of an integer as that integer
/// so that e.g. `0.3 * 1000` masks exactly 300 items.
pub fn masked_count(rate: f64, total: usize) -> usize {
    let x = rate * total as f64;
    let nearest = x.round();
    let count = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    (count as usize).min(total)
}

/// Hides a uniformly random share of feature entries (or rows) and edges.
///
/// Entry mode hides `ceil(rate·n·d)` currently observed entries (all of them if
/// fewer remain); row mode hides `ceil(rate·n)` whole rows. `ceil(rate·|E|)`
/// undirected edges are removed. Masking composes and never reveals an entry.
pub fn apply_mask(ds: &GraphDataset, spec: &MaskSpec) -> Result<GraphDataset> {
    spec.validate()?;
    let (n, d) = (ds.n(), ds.d());
    let mut mask = ds.feature_mask().to_vec();

    let mut rng = stream(spec.seed, Stream::FeatureMask);
    match spec.feature_mode {
        FeatureMaskMode::Entry => {
            let observed: Vec<usize> = (0..n * d).filter(|&i| mask[i]).collect();
            let count = masked_count(spec.feature_missing_rate, n * d).min(observed.len());
            for pick in index::sample(&mut rng, observed.len(), count) {
                mask[observed[pick]] = false;
            }
        }
        FeatureMaskMode::Row => {
            let count = masked_count(spec.feature_missing_rate, n);
            for row in index::sample(&mut rng, n, count) {
                mask[row * d..(row + 1) * d].iter_mut().for_each(|m| *m = false);
            }
        }
    }
    let mut features = ds.features().clone();
    for (v, &m) in features.data_mut().iter_mut().zip(&mask) {
        if !m {
            *v = 0.0;
        }
    }

    let mut rng = stream(spec.seed, Stream::EdgeMask);
    let edges = ds.edges();
    let drop = masked_count(spec.edge_missing_rate, edges.len());
    let mut removed = vec![false; edges.len()];
    for i in index::sample(&mut rng, edges.len(), drop) {
        removed[i] = true;
    }
    let kept = edges
        .iter()
        .zip(&removed)
        .filter(|(_, &r)| !r)
        .map(|(&e, _)| e)
        .collect();

    Ok(ds.with_observations(features, mask, kept))
}
