//! Bird's-eye-view density images.
//!
//! A cloud is voxel-filtered, then every point inside the square window
//! `[-L, L)²` is binned on a `g`-meter grid. Row `i = ⌊(L − y)/g⌋`, column
//! `j = ⌊(x + L)/g⌋`. The pixel value is `min(N_g, N_n) / N_m`, with `N_g`
//! the cell count, `N_n` the density clamp and `N_m` the per-image maximum
//! of the clamped counts. The raster is zero-padded to `output_side`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BevConfig {
    /// Half side `L` of the square window, meters.
    pub half_window: f64,
    /// Cell size `g`, meters. Also the voxel-filter leaf size.
    pub grid_resolution: f64,
    /// Density clamp `N_n`.
    pub density_clamp: u32,
    /// Side of the emitted image after zero padding.
    pub output_side: usize,
    /// Optional `[z_min, z_max]` crop applied before binning.
    #[serde(default)]
    pub z_range: Option<(f64, f64)>,
}

impl Default for BevConfig {
    fn default() -> Self {
        BevConfig {
            half_window: 25.0,
            grid_resolution: 0.4,
            density_clamp: 10,
            output_side: 128,
            z_range: None,
        }
    }
}

impl BevConfig {
    /// Side of the unpadded raster, `⌊2L/g⌋`.
    pub fn raster_side(&self) -> usize {
        (2.0 * self.half_window / self.grid_resolution + 1e-9).floor() as usize
    }

    /// Offset of the raster inside the padded output image.
    pub fn pad_before(&self) -> usize {
        (self.output_side - self.raster_side()) / 2
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.half_window.is_finite() && self.half_window > 0.0) {
            return bad(format!("half_window must be > 0, got {}", self.half_window));
        }
        if !(self.grid_resolution.is_finite() && self.grid_resolution > 0.0) {
            return bad(format!("grid_resolution must be > 0, got {}", self.grid_resolution));
        }
        if self.density_clamp < 1 {
            return bad("density_clamp must be >= 1".into());
        }
        let side = 2.0 * self.half_window / self.grid_resolution;
        if side > 1.0e5 {
            return bad(format!("raster side {side} is unreasonably large"));
        }
        let side = self.raster_side();
        if side < 8 {
            return bad(format!("raster side {side} must be >= 8"));
        }
        if self.output_side < side {
            return bad(format!(
                "output_side {} is smaller than the raster side {side}",
                self.output_side
            ));
        }
        if let Some((lo, hi)) = self.z_range {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return bad(format!("z_range must satisfy z_min < z_max, got ({lo}, {hi})"));
            }
        }
        Ok(())
    }
}

/// Single-channel density image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevImage {
    side: usize,
    pixels: Vec<f64>,
    raster_side: usize,
    pad_before: usize,
    frame_pose: Option<Pose2>,
}

impl BevImage {
    pub fn zeros(side: usize) -> Self {
        BevImage {
            side,
            pixels: vec![0.0; side * side],
            raster_side: side,
            pad_before: 0,
            frame_pose: None,
        }
    }

    /// Wraps raw pixels; values must be finite and inside `[0, 1]`.
    pub fn from_pixels(side: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != side * side {
            return Err(Error::ShapeMismatch {
                context: "BevImage::from_pixels".into(),
                expected: vec![side, side],
                actual: vec![pixels.len()],
            });
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("BEV pixel {v} outside [0, 1]")));
        }
        Ok(BevImage {
            side,
            pixels,
            raster_side: side,
            pad_before: 0,
            frame_pose: None,
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.side + col]
    }

    /// Side of the populated raster region (before padding).
    pub fn raster_side(&self) -> usize {
        self.raster_side
    }

    pub fn pad_before(&self) -> usize {
        self.pad_before
    }

    pub fn frame_pose(&self) -> Option<Pose2> {
        self.frame_pose
    }

    pub fn with_frame_pose(mut self, pose: Pose2) -> Self {
        self.frame_pose = Some(pose);
        self
    }

    pub fn max_value(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }

    /// Rotates the raster region by `k` quarter turns counter-clockwise.
    ///
    /// Matches rasterizing the cloud after rotating it by `k·90°` about
    /// the window center.
    pub fn rotated_quarter_turns(&self, k: i32) -> BevImage {
        let n = self.raster_side;
        let off = self.pad_before;
        let mut out = vec![0.0; self.pixels.len()];
        let k = k.rem_euclid(4);
        for i in 0..n {
            for j in 0..n {
                let (ri, rj) = match k {
                    0 => (i, j),
                    1 => (n - 1 - j, i),
                    2 => (n - 1 - i, n - 1 - j),
                    _ => (j, n - 1 - i),
                };
                out[(ri + off) * self.side + rj + off] = self.pixels[(i + off) * self.side + j + off];
            }
        }
        BevImage {
            pixels: out,
            ..self.clone()
        }
    }

    /// Encodes as an 8-bit grayscale PNG, `round(255·pixel)`.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
            .collect();
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.side as u32, self.side as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
            w.write_image_data(&bytes)
                .map_err(|e| Error::format("png", e.to_string()))?;
        }
        Ok(buf)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Little-endian float32, row-major `side × side`.
    pub fn to_f32_le(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() * 4);
        for v in &self.pixels {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    /// Decodes the float32 layout; the side is inferred from the length.
    pub fn from_f32_le(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(4) {
            return Err(Error::format(
                "BEV float32 image",
                format!("length {} is not a multiple of 4", bytes.len()),
            ));
        }
        let n = bytes.len() / 4;
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n || side == 0 {
            return Err(Error::format(
                "BEV float32 image",
                format!("{n} values do not form a non-empty square"),
            ));
        }
        let pixels: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if let Some((i, v)) = pixels.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::format(
                "BEV float32 image",
                format!("value {v} at index {i} outside [0, 1]"),
            ));
        }
        Ok(BevImage {
            side,
            pixels,
            raster_side: side,
            pad_before: 0,
            frame_pose: None,
        })
    }

    pub fn write_f32(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_f32_le()).map_err(|e| Error::io(path, e))
    }
}

/// Side statistics of a rasterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RasterStats {
    pub in_window: usize,
    pub dropped: usize,
}

/// Keeps one point per occupied `leaf`-sized voxel, at the centroid of the
/// voxel's points. Output order follows first occupancy.
pub fn voxel_filter(cloud: &PointCloud, leaf: f64) -> Result<PointCloud> {
    if !(leaf.is_finite() && leaf > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "voxel leaf size must be > 0, got {leaf}"
        )));
    }
    let mut slots: HashMap<[i64; 3], usize> = HashMap::with_capacity(cloud.len());
    let mut acc: Vec<([f64; 3], u32)> = Vec::new();
    for p in cloud.points() {
        let key = [
            (p[0] / leaf).floor() as i64,
            (p[1] / leaf).floor() as i64,
            (p[2] / leaf).floor() as i64,
        ];
        let slot = *slots.entry(key).or_insert_with(|| {
            acc.push(([0.0; 3], 0));
            acc.len() - 1
        });
        let (sum, n) = &mut acc[slot];
        for k in 0..3 {
            sum[k] += p[k];
        }
        *n += 1;
    }
    let points = acc
        .into_iter()
        .map(|(s, n)| {
            let n = n as f64;
            [s[0] / n, s[1] / n, s[2] / n]
        })
        .collect();
    Ok(PointCloud::from_finite(points))
}

/// Cell index of a point, or `None` when it falls outside the window.
pub fn cell_of(p: &[f64; 3], cfg: &BevConfig) -> Option<(usize, usize)> {
    let l = cfg.half_window;
    let g = cfg.grid_resolution;
    if !(p[0] >= -l && p[0] < l && p[1] >= -l && p[1] < l) {
        return None;
    }
    if let Some((lo, hi)) = cfg.z_range {
        if p[2] < lo || p[2] > hi {
            return None;
        }
    }
    let side = cfg.raster_side();
    let row = ((l - p[1]) / g).floor();
    let col = ((p[0] + l) / g).floor();
    if row < 0.0 || col < 0.0 {
        return None;
    }
    let (row, col) = (row as usize, col as usize);
    (row < side && col < side).then_some((row, col))
}

/// Per-cell point counts `N_g` over the unpadded raster.
pub fn cell_counts(cloud: &PointCloud, cfg: &BevConfig) -> (Vec<u32>, RasterStats) {
    let side = cfg.raster_side();
    let mut counts = vec![0u32; side * side];
    let mut stats = RasterStats::default();
    for p in cloud.points() {
        match cell_of(p, cfg) {
            Some((r, c)) => {
                counts[r * side + c] += 1;
                stats.in_window += 1;
            }
            None => stats.dropped += 1,
        }
    }
    (counts, stats)
}

/// Rasterizes an already voxel-filtered cloud.
pub fn rasterize(cloud: &PointCloud, cfg: &BevConfig) -> Result<BevImage> {
    rasterize_with_stats(cloud, cfg).map(|(img, _)| img)
}

pub fn rasterize_with_stats(cloud: &PointCloud, cfg: &BevConfig) -> Result<(BevImage, RasterStats)> {
    cfg.validate()?;
    let (counts, stats) = cell_counts(cloud, cfg);
    let clamp = cfg.density_clamp;
    let n_max = counts.iter().map(|&c| c.min(clamp)).max().unwrap_or(0);
    let side = cfg.raster_side();
    let out = cfg.output_side;
    let off = cfg.pad_before();
    let mut pixels = vec![0.0; out * out];
    if n_max > 0 {
        let denom = n_max as f64;
        for r in 0..side {
            for c in 0..side {
                let n = counts[r * side + c];
                if n > 0 {
                    pixels[(r + off) * out + c + off] = n.min(clamp) as f64 / denom;
                }
            }
        }
    }
    Ok((
        BevImage {
            side: out,
            pixels,
            raster_side: side,
            pad_before: off,
            frame_pose: None,
        },
        stats,
    ))
}

/// Voxel filter followed by rasterization, tagging the image with `pose`.
pub fn render(cloud: &PointCloud, cfg: &BevConfig, pose: Option<Pose2>) -> Result<BevImage> {
    let filtered = voxel_filter(cloud, cfg.grid_resolution)?;
    let mut img = rasterize(&filtered, cfg)?;
    img.frame_pose = pose;
    Ok(img)
}
