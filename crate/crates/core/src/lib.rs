//! Explicit anatomical shape priors for multi-compartment heart segmentation.
//!
//! The crate covers the full desk-scale pipeline: volume I/O and geometric
//! normalization, Procrustes-aligned label-distribution atlases, population
//! shape statistics, differentiable shape-aware losses with analytic
//! gradients, overlap and surface-distance metrics, synthetic phantoms, and a
//! per-voxel affine segmenter trained by full-batch gradient descent.

pub mod align;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod phantom;
mod numeric;
pub mod preprocess;
pub mod report;
pub mod stats;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{
    argmax_labels, one_hot, ClassField, ClassId, Grid, LabelVolume, ProbVolume, Volume, Voxel,
    WorldPoint, NUM_CLASSES,
};
