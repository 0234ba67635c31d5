//! LiDAR localization as conditional pose generation.
//!
//! Point clouds become normalized-density bird's-eye-view images
//! ([`bev`]), which a rotation-equivariant feature network
//! ([`feature_net`]) turns into per-frame global descriptors. A
//! transformer denoiser ([`diffusion`]) then recovers the planar poses of
//! a short frame sequence from Gaussian noise with deterministic DDIM
//! sampling. [`synthworld`] provides a reproducible synthetic LiDAR world
//! and dataset format; [`pipeline`] holds training, evaluation and
//! checkpoints.

pub mod augment;
pub mod bev;
pub mod diffusion;
pub mod error;
pub mod feature_net;
pub mod geometry;
pub mod invariants;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod synthworld;

pub use error::{Error, Result};
pub use geometry::{PointCloud, Pose2};
