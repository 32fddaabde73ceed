//! Sparse-view CT reconstruction with graph-regularized radiative Gaussian
//! kernels.
//!
//! The object is a cloud of Gaussian density kernels linked by a mutual-KNN
//! graph. Projections are rendered with closed-form per-kernel ray integrals,
//! optimized against measured views with photometric and regularization
//! losses, densified by a pixel-graph-aware rule, and finally voxelized into
//! a dense density volume.

pub mod density;
pub mod error;
pub mod fbp;
pub mod graph;
pub mod init;
pub mod losses;
pub mod phantom;
pub mod render;
pub mod projector;
pub mod types;
pub mod voxelize;

pub use error::{Error, Result};
