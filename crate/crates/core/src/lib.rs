//! Self-supervised pre-training on multi-view images with a Gaussian-splat
//! reconstruction objective.
//!
//! The pipeline: random patch masks are validated against projected LiDAR
//! depth, rays are cast through the surviving patches, Gaussian anchors are
//! sampled along each ray, their splat parameters are decoded from a voxel
//! feature grid, and RGB / depth / occupancy reconstructions of the masked
//! regions drive an L1 training objective. Every backward pass is hand
//! derived and checked against central finite differences.

pub mod decoder;
pub mod driver;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod loss;
pub mod masking;
pub mod optim;
pub mod rays;
pub mod render;
pub mod rng;
pub mod synth;
pub mod voxel;

pub use driver::{EncoderMode, EvalMetrics, SceneSource, TrainConfig, TrainState};
pub use error::{Error, Result};
pub use geometry::{Camera, Covariance3, Quaternion, Ray};
pub use masking::{LidarCloud, MaskConfig, PatchMask, ValidMask};
pub use rays::{AnchorSet, RayBatch, TargetRay};
pub use voxel::{GridGeometry, TargetVoxels, VoxelGrid};
