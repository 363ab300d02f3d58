//! Unsupervised reconstruction of missing node features and graph structure.
//!
//! A feature path imputes hidden attributes with a small perceptron and decodes
//! a dense structure view from them; a structure path diffuses the observed
//! edges with personalized PageRank, keeps the strongest links per node and
//! propagates learned positional features over them. Both paths are trained
//! without labels by contrasting their outputs. A downstream graph-convolution
//! classifier then consumes an attention-weighted fusion of the two views.
//!
//! ```no_run
//! use ugcl::graph::{apply_mask, load_dataset, make_splits, MaskSpec, SplitRatios};
//! use ugcl::{run_ugcl, train_downstream, DownstreamConfig, UgclConfig};
//!
//! # fn main() -> ugcl::Result<()> {
//! let clean = load_dataset("data/cora".as_ref())?;
//! let masked = apply_mask(&clean, &MaskSpec::new(0.3, 0.3, 0))?;
//! let splits = make_splits(&masked, SplitRatios::default(), 0)?;
//! let recon = run_ugcl(&masked, &UgclConfig::default(), 0)?;
//! let outcome = train_downstream(&masked, &recon, &splits, &DownstreamConfig::default(), 0)?;
//! println!("test accuracy {:.4}", outcome.metrics.test_accuracy);
//! # Ok(())
//! # }
//! ```

pub mod downstream;
pub mod error;
pub mod experiment;
pub mod feature_path;
pub mod fusion;
pub mod graph;
pub mod objective;
pub mod pipeline;
pub mod rng;
pub mod structure_path;
pub mod tensor;

pub use downstream::{evaluate, gcn_forward, train_baseline_gcn, train_downstream, DownstreamConfig, Metrics};
pub use error::{Error, Result};
pub use experiment::{export_embeddings, run_experiment, run_experiment_on, ExperimentConfig};
pub use feature_path::{feature_path, FeaturePathOut};
pub use fusion::{attention_fuse, FusionOut, FusionParams};
pub use objective::{feature_contrastive_loss, structure_contrastive_loss, total_loss, ContrastiveConfig, LossParts};
pub use pipeline::{run_ugcl, ReconState, UgclConfig};
pub use structure_path::{ppnp_forward, PprConfig, PprMethod};
