//! Self-supervised keypoint detector training driven by multi-view voxel
//! repeatability.
//!
//! The pipeline alternates two steps over rendered scenes with exact depth
//! and pose:
//!
//! 1. **Expectation** ([`voxelrep`]): every view's detector heatmap is
//!    splatted into a voxel grid through ground-truth depth, giving each
//!    voxel a soft repeatability `D / N`, which is then rendered back into
//!    each view.
//! 2. **Maximization** ([`maximizer`], [`detector`]): a constrained greedy
//!    selection turns each repeatability map into binary pseudo labels and
//!    the detector is trained on them with a per-pixel cross entropy.
//!
//! [`emloop`] drives the iterations, [`scenegen`] produces the data and
//! [`evalbench`] scores the result.

pub mod camgeom;
pub mod cli;
pub mod detector;
pub mod emloop;
pub mod maximizer;
pub mod voxelrep;
pub mod error;
pub mod evalbench;
pub mod raster;
pub mod scenegen;
pub mod seeding;

pub use error::{Error, Result};
