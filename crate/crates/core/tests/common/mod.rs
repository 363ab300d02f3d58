#![allow(dead_code)]

use ugcl::graph::{generate_sbm, indicator_means, GraphDataset, SbmSpec};
use ugcl::tensor::DenseMatrix;
use ugcl::{PprConfig, UgclConfig};

/// Offset of each block's indicator dimensions in the synthetic fixture.
pub const SBM_MU: f64 = 0.1;

/// Two blocks of 50 nodes, p_in 0.3, p_out 0.02, 16 features, noise sd 0.5.
pub fn sbm_fixture() -> GraphDataset {
    generate_sbm(&SbmSpec {
        n_per_block: 50,
        blocks: 2,
        p_in: 0.3,
        p_out: 0.02,
        feat_means: indicator_means(2, 16, SBM_MU),
        noise_sd: 0.5,
        seed: 0,
    })
    .unwrap()
}

/// Noise-free blocks with no cross edges.
pub fn separable_sbm(seed: u64) -> GraphDataset {
    generate_sbm(&SbmSpec {
        n_per_block: 20,
        blocks: 2,
        p_in: 0.3,
        p_out: 0.0,
        feat_means: indicator_means(2, 8, 1.0),
        noise_sd: 0.0,
        seed,
    })
    .unwrap()
}

/// Six nodes, four features, a ring with one chord, a few hidden entries.
pub fn six_node() -> GraphDataset {
    let features = DenseMatrix::from_fn(6, 4, |i, j| ((i * 5 + j * 3) % 7) as f64 * 0.4 - 1.1 + 0.05 * j as f64);
    let mut mask = vec![true; 24];
    for idx in [1, 6, 11, 14, 20] {
        mask[idx] = false;
    }
    let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)];
    let labels = vec![Some(0), Some(0), Some(1), Some(1), Some(0), Some(1)];
    GraphDataset::new(features, mask, edges, labels, 2).unwrap()
}

/// Narrow reconstruction model for quick checks.
pub fn small_ugcl(epochs: usize) -> UgclConfig {
    UgclConfig {
        ppr: PprConfig { k: 3, ..PprConfig::default() },
        imputer_hidden: 5,
        pe_hidden: 7,
        ppnp_hidden: 5,
        epochs,
        ..UgclConfig::default()
    }
}
