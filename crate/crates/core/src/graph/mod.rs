//! Graph data model, on-disk format, masking protocol, splits and synthetic graphs.

pub mod dataset;
pub mod mask;
pub mod sbm;
pub mod splits;

pub use dataset::{load_dataset, write_dataset, GraphDataset, Manifest};
pub use mask::{apply_mask, FeatureMaskMode, MaskSpec};
pub use sbm::{generate_sbm, indicator_means, SbmSpec};
pub use splits::{make_splits, SplitRatios, Splits};
