use rand::seq::SliceRandom;

use super::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Disjoint node-id sets, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r > 0.0 && *r < 1.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "split ratios {:?} must be positive and sum to 1",
                parts
            )));
        }
        Ok(())
    }
}

/// Per-class stratified train/validation/test partition of the labelled nodes.
///
/// For a class of `m` members the train and validation sizes are
/// `max(1, round(ratio·m))`; train shrinks if needed so that test keeps at
/// least one node. Classes with fewer than three members cannot be stratified.
pub fn make_splits(ds: &GraphDataset, ratios: SplitRatios, seed: u64) -> Result<Splits> {
    ratios.validate()?;
    if !ds.has_labels() {
        return Err(Error::InvalidDataset("cannot split a dataset without labels".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (node, label) in ds.labels().iter().enumerate() {
        if let Some(c) = label {
            by_class[*c].push(node);
        }
    }
    let mut rng = stream(seed, Stream::Split);
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (class, mut members) in by_class.into_iter().enumerate() {
        let m = members.len();
        if m == 0 {
            continue;
        }
        if m < 3 {
            return Err(Error::InvalidDataset(format!(
                "class {class} has {m} labelled nodes; at least 3 are needed to stratify"
            )));
        }
        members.shuffle(&mut rng);
        let val = ((ratios.val * m as f64).round() as usize).max(1);
        let mut train = ((ratios.train * m as f64).round() as usize).max(1);
        if train + val >= m {
            train = m - val - 1;
        }
        splits.train.extend_from_slice(&members[..train]);
        splits.val.extend_from_slice(&members[train..train + val]);
        splits.test.extend_from_slice(&members[train + val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}
