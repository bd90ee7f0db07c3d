//! Domain-generalized LiDAR semantic segmentation.
//!
//! Scans are voxelized into sparse grids and segmented by a small sparse
//! encoder-decoder. During training the decoder features are also projected
//! onto a dense bird's-eye-view raster, where an auxiliary 2D head learns the
//! top-down semantic layout. That head is dropped at inference.
//!
//! The crate also carries the pieces needed to study the approach end to end:
//! a procedural multi-sensor LiDAR simulator ([`synth`]), augmentation
//! baselines ([`augment`]), and a cross-domain evaluation harness ([`eval`]).

pub mod augment;
pub mod bev;
pub mod cloud;
pub mod eval;
mod error;
pub mod net;
pub mod seed;
pub mod synth;
pub mod train;
pub mod voxel;

pub use cloud::{ClassId, ClassVocabulary, Point, PointCloud};
pub use error::{Error, Result};

/// The guide under `book/`, compiled so its examples stay correct.
#[cfg(doctest)]
pub mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/point-clouds.md")]
    pub mod point_clouds {}
    #[doc = include_str!("../../../book/src/voxels.md")]
    pub mod voxels {}
    #[doc = include_str!("../../../book/src/bev.md")]
    pub mod bev {}
    #[doc = include_str!("../../../book/src/network.md")]
    pub mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    pub mod augmentation {}
    #[doc = include_str!("../../../book/src/synth.md")]
    pub mod synth {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
