//! Local-map augmentation.
//!
//! Clouds from `M` frames spaced `S` apart are stitched into a local map
//! around an anchor frame; new BEV images are rendered from randomly
//! displaced and rotated virtual viewpoints inside that map, with the
//! virtual pose as the training label.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bev::{rasterize_with_stats, voxel_filter, BevConfig, BevImage};
use crate::error::{Error, Result};
use crate::geometry::{transform_cloud, PointCloud, Pose2};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Frames `M` stitched per local map.
    pub frames: usize,
    /// Frame interval `S` between stitched clouds.
    pub interval: usize,
    /// Standard deviation `τ` of the virtual position offset, meters.
    pub offset_std: f64,
    /// Chance that a training frame is replaced by a virtual view.
    pub apply_probability: f64,
    /// Virtual views with fewer in-window points are rejected.
    pub min_points: usize,
    /// Resampling attempts before falling back to the raw view.
    pub max_attempts: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            frames: 5,
            interval: 20,
            offset_std: 2.0,
            apply_probability: 0.5,
            min_points: 50,
            max_attempts: 8,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.frames < 1 || self.interval < 1 {
            return bad(format!(
                "augmentation needs frames >= 1 and interval >= 1, got {} and {}",
                self.frames, self.interval
            ));
        }
        if !(self.offset_std.is_finite() && self.offset_std >= 0.0) {
            return bad(format!("offset_std must be >= 0, got {}", self.offset_std));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return bad(format!(
                "apply_probability must be in [0, 1], got {}",
                self.apply_probability
            ));
        }
        if self.max_attempts < 1 {
            return bad("max_attempts must be >= 1".into());
        }
        Ok(())
    }

    /// Indices of the frames stitched around `center` in a sequence of
    /// `len` frames: `M` offsets spaced `S` apart, centered, clipped to the
    /// sequence.
    pub fn window(&self, center: usize, len: usize) -> Vec<usize> {
        let half = (self.frames as i64 - 1) / 2;
        (0..self.frames as i64)
            .map(|j| center as i64 + (j - half) * self.interval as i64)
            .filter(|&i| i >= 0 && (i as usize) < len)
            .map(|i| i as usize)
            .collect()
    }
}

/// Moves every cloud into the anchor's frame, concatenates and
/// voxel-filters at `leaf`.
pub fn stitch_local_map(frames: &[(&PointCloud, Pose2)], anchor: &Pose2, leaf: f64) -> Result<PointCloud> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("cannot stitch an empty frame list".into()));
    }
    let to_anchor = anchor.inverse();
    let mut map = PointCloud::empty();
    for (cloud, pose) in frames {
        map.extend(&transform_cloud(&to_anchor.compose(pose), cloud));
    }
    voxel_filter(&map, leaf)
}

/// Anchor position plus `N(0, τ²)` offsets, with a uniform yaw in `(−π, π]`.
pub fn sample_virtual_pose(anchor: &Pose2, cfg: &AugmentConfig, rng_seed: u64) -> Pose2 {
    let mut rng = seed::rng(rng_seed, &[]);
    let dx: f64 = StandardNormal.sample(&mut rng);
    let dy: f64 = StandardNormal.sample(&mut rng);
    let u: f64 = rng.random();
    Pose2::new(
        anchor.x() + cfg.offset_std * dx,
        anchor.y() + cfg.offset_std * dy,
        PI - 2.0 * PI * u,
    )
}

/// Points of an anchor-frame `map` expressed in the `virtual` frame.
pub fn virtual_view_points(map: &PointCloud, virtual_pose: &Pose2, anchor: &Pose2) -> PointCloud {
    let rel = anchor.inverse().compose(virtual_pose);
    transform_cloud(&rel.inverse(), map)
}

/// Renders the anchor-frame `map` as seen from `virtual_pose`.
///
/// Fails with [`Error::SparseView`] when fewer than `min_points` map
/// points land inside the window.
pub fn render_virtual_bev(
    map: &PointCloud,
    virtual_pose: &Pose2,
    anchor: &Pose2,
    bev: &BevConfig,
    min_points: usize,
) -> Result<BevImage> {
    let local = virtual_view_points(map, virtual_pose, anchor);
    let (img, stats) = rasterize_with_stats(&local, bev)?;
    if stats.in_window < min_points {
        return Err(Error::SparseView {
            in_window: stats.in_window,
            required: min_points,
        });
    }
    Ok(img.with_frame_pose(*virtual_pose))
}

/// Draws virtual poses until one renders with enough points.
///
/// Attempt `a` uses the seed derived from `(rng_seed, a)`; after
/// `max_attempts` sparse views the last [`Error::SparseView`] is returned.
pub fn augment_view(
    map: &PointCloud,
    anchor: &Pose2,
    cfg: &AugmentConfig,
    bev: &BevConfig,
    rng_seed: u64,
) -> Result<BevImage> {
    let mut last = None;
    for attempt in 0..cfg.max_attempts {
        let pose = sample_virtual_pose(anchor, cfg, seed::derive(rng_seed, &[attempt as u64]));
        match render_virtual_bev(map, &pose, anchor, bev, cfg.min_points) {
            Err(e @ Error::SparseView { .. }) => last = Some(e),
            other => return other,
        }
    }
    Err(last.unwrap_or(Error::SparseView {
        in_window: 0,
        required: cfg.min_points,
    }))
}
