//! Layer-wise relevance propagation for convolutional segmentation networks.
//!
//! The crate covers the whole pipeline on small, file-backed models:
//!
//! - [`tensor`]: dense `f64` tensors and the forward kernels (convolution,
//!   max pooling, nearest-neighbour upsampling, channel concatenation).
//! - [`graph`]: layer DAGs, validation, forward inference with a full
//!   activation cache, and voxel-wise segmentation.
//! - [`lrp`]: backward relevance rules (epsilon, alpha-beta, z+) and the
//!   graph walk that explains one output neuron.
//! - [`explain`]: region aggregation of unit-normalized per-location maps and
//!   per-input-channel importance reports.
//! - [`io`]: TNSR tensor files, TOML model manifests, PGM heatmaps, CSV
//!   reports.
//! - [`toy`]: seeded toy U-Nets, synthetic volumes and hand-constructed
//!   models with known answers.
//!
//! ```
//! use seglrp::{explain, lrp::PropagationRule, toy};
//!
//! let model = toy::toy_unet(7, 6);
//! let data = toy::synthetic_volume(1, 6, 16, 3).unwrap();
//! let cache = model.forward(&data.volume).unwrap();
//! let region = explain::RegionSpec::new(1, vec![vec![8, 8], vec![4, 5]]).unwrap();
//! let agg = explain::aggregate_region(&model, &cache, &region, PropagationRule::default()).unwrap();
//! assert!((agg.total() - (2 - agg.skipped_locations) as f64).abs() < 1e-9);
//! ```

pub mod error;
pub mod explain;
pub mod graph;
pub mod io;
pub mod lrp;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use explain::{
    aggregate_region, channel_importance, importance_distribution, select_balanced_regions,
    AggregatedMap, ChannelImportanceReport, LabelMap, RegionSpec,
};
pub use graph::{ActivationCache, LayerKind, LayerSpec, ModelGraph};
pub use lrp::{explain_location, OutputSeed, PropagationRule, RelevanceState};
pub use tensor::Tensor;
