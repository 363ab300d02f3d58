use rand::Rng as _;
use rand_distr::StandardNormal;

use super::dataset::GraphDataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::DenseMatrix;

/// Parameters of a stochastic block model with block-conditioned Gaussian features.
#[derive(Debug, Clone, PartialEq)]
pub struct SbmSpec {
    pub n_per_block: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// One mean vector per block; all of equal length `d`.
    pub feat_means: Vec<Vec<f64>>,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Samples an SBM graph. Node `i` belongs to block `i / n_per_block`, which is also its label.
pub fn generate_sbm(spec: &SbmSpec) -> Result<GraphDataset> {
    for (what, p) in [("p_in", spec.p_in), ("p_out", spec.p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("{what} = {p} outside [0, 1]")));
        }
    }
    if !(spec.noise_sd >= 0.0 && spec.noise_sd.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise_sd = {} must be >= 0", spec.noise_sd)));
    }
    if spec.feat_means.len() != spec.blocks {
        return Err(Error::InvalidParameter(format!(
            "{} mean vectors for {} blocks",
            spec.feat_means.len(),
            spec.blocks
        )));
    }
    let d = spec.feat_means.first().map_or(0, Vec::len);
    if spec.feat_means.iter().any(|m| m.len() != d) {
        return Err(Error::InvalidParameter("block mean vectors differ in length".into()));
    }

    let n = spec.n_per_block * spec.blocks;
    let block = |i: usize| i / spec.n_per_block;
    let mut rng = stream(spec.seed, Stream::Generator);

    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block(u) == block(v) { spec.p_in } else { spec.p_out };
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let features = DenseMatrix::from_fn(n, d, |i, j| {
        let z: f64 = rng.sample(StandardNormal);
        spec.feat_means[block(i)][j] + spec.noise_sd * z
    });
    let labels = (0..n).map(|i| Some(block(i))).collect();
    GraphDataset::fully_observed(features, edges, labels, spec.blocks)
}

/// Block means with `mu` on every dimension `j` where `j % blocks == b` for block `b`, zero elsewhere.
pub fn indicator_means(blocks: usize, d: usize, mu: f64) -> Vec<Vec<f64>> {
    (0..blocks)
        .map(|b| (0..d).map(|j| if j % blocks == b { mu } else { 0.0 }).collect())
        .collect()
}
