//! Deterministic synthetic 2.5D world, LiDAR simulator and trajectories.
//!
//! A world is a square of side `extent` centered on the origin. A
//! rounded-rectangle loop corridor is kept free; axis-aligned building
//! blocks fill the inner courtyard and the outer strips, and thin poles are
//! scattered between them. Every obstacle is a convex polygon extruded over
//! a height range.

mod dataset;
mod scan;
mod trajectory;

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use dataset::{
    cloud_file_name, parse_cloud_bin, parse_poses_csv, write_cloud_bin, write_dataset, write_poses_csv, Dataset,
    DatasetMeta, FrameRecord, PoseRow, WorldFile, DATASET_FORMAT_VERSION, FRAME_INTERVAL, POSES_HEADER,
};
pub use scan::{cast_ray, simulate_scan, ScanConfig};
pub use trajectory::{generate_trajectory, TrajectoryParams};

/// Convex polygon (counter-clockwise vertices) extruded over `[z_min, z_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub vertices: Vec<[f64; 2]>,
    pub z_min: f64,
    pub z_max: f64,
}

impl Obstacle {
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64, z_min: f64, z_max: f64) -> Self {
        Obstacle {
            vertices: vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]],
            z_min,
            z_max,
        }
    }

    /// Regular polygon approximating a disk.
    pub fn disk(cx: f64, cy: f64, r: f64, sides: usize, z_min: f64, z_max: f64) -> Self {
        Obstacle {
            vertices: (0..sides)
                .map(|i| {
                    let a = 2.0 * PI * i as f64 / sides as f64;
                    [cx + r * a.cos(), cy + r * a.sin()]
                })
                .collect(),
            z_min,
            z_max,
        }
    }

    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        let n = v.len();
        0.5 * (0..n)
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % n]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
    }

    pub fn edges(&self) -> impl Iterator<Item = ([f64; 2], [f64; 2])> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Point-in-polygon for a counter-clockwise convex polygon, boundary
    /// inclusive.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        self.edges().all(|(a, b)| cross(sub(b, a), sub(p, a)) >= 0.0)
    }

    /// Euclidean distance from `p` to the polygon (0 inside).
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        if self.contains(p) {
            return 0.0;
        }
        self.edges()
            .map(|(a, b)| segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn height_overlaps(&self, z: f64) -> bool {
        z >= self.z_min && z <= self.z_max
    }

    fn validate(&self, extent: f64) -> Result<()> {
        let bad = |m: String| Err(Error::format("world obstacle", m));
        if self.vertices.len() < 3 {
            return bad(format!("polygon has {} vertices", self.vertices.len()));
        }
        let h = extent / 2.0;
        for v in &self.vertices {
            if !(v[0].is_finite() && v[1].is_finite()) || v[0].abs() > h || v[1].abs() > h {
                return bad(format!("vertex {v:?} outside the {extent} m extent"));
            }
        }
        if !(self.z_min.is_finite() && self.z_max.is_finite() && self.z_min <= self.z_max) {
            return bad(format!("bad height range [{}, {}]", self.z_min, self.z_max));
        }
        if self.area() <= 0.01 {
            return bad(format!(
                "polygon area {} is degenerate or not counter-clockwise",
                self.area()
            ));
        }
        let n = self.vertices.len();
        for i in 0..n {
            let (a, b, c) = (self.vertices[i], self.vertices[(i + 1) % n], self.vertices[(i + 2) % n]);
            if cross(sub(b, a), sub(c, b)) < -1e-9 {
                return bad("polygon is not convex".into());
            }
        }
        Ok(())
    }
}

pub(crate) fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    d[0].hypot(d[1])
}

/// Layout parameters; lengths scale with `extent` where noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    /// Side of the square world, meters.
    pub extent: f64,
    /// Half side of the corridor loop as a fraction of `extent`.
    pub loop_fraction: f64,
    /// Corridor width as a fraction of `extent`.
    pub corridor_fraction: f64,
    /// Corner radius as a fraction of the loop half side.
    pub corner_fraction: f64,
    /// Target block cell size, meters.
    pub block_pitch: f64,
    /// Chance that a block cell holds a building.
    pub block_density: f64,
    /// Building heights, meters.
    pub block_height: (f64, f64),
    /// Poles per square meter of world area.
    pub pole_density: f64,
    pub pole_height: (f64, f64),
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            extent: 100.0,
            loop_fraction: 0.3,
            corridor_fraction: 0.1,
            corner_fraction: 0.4,
            block_pitch: 12.5,
            block_density: 0.85,
            block_height: (3.0, 15.0),
            pole_density: 0.003,
            pole_height: (2.0, 6.0),
        }
    }
}

impl WorldParams {
    pub fn loop_half(&self) -> f64 {
        self.loop_fraction * self.extent
    }

    pub fn corridor_width(&self) -> f64 {
        self.corridor_fraction * self.extent
    }

    pub fn corner_radius(&self) -> f64 {
        self.corner_fraction * self.loop_half()
    }

    pub fn centerline(&self) -> Centerline {
        Centerline {
            half: self.loop_half(),
            radius: self.corner_radius(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.extent.is_finite() && self.extent >= 20.0) {
            return bad(format!("world extent must be >= 20 m, got {}", self.extent));
        }
        let a = self.loop_half();
        let w = self.corridor_width();
        let rc = self.corner_radius();
        if !(w > 0.0 && a - w / 2.0 > 0.0 && a + w / 2.0 < self.extent / 2.0) {
            return bad(format!(
                "corridor loop (half side {a}, width {w}) does not fit in a {} m world",
                self.extent
            ));
        }
        if !(rc > 0.0 && rc <= a) {
            return bad(format!("corner radius {rc} must be in (0, {a}]"));
        }
        let free = self.centerline().length() * w / (self.extent * self.extent);
        if free < 0.2 {
            return bad(format!(
                "corridor covers only {:.1}% of the world, need at least 20%",
                100.0 * free
            ));
        }
        if !(0.0..=1.0).contains(&self.block_density) || !(self.pole_density >= 0.0 && self.pole_density < 1.0) {
            return bad("block_density must be in [0, 1] and pole_density in [0, 1)".into());
        }
        if !(self.block_pitch.is_finite() && self.block_pitch >= 2.0) {
            return bad(format!("block_pitch must be >= 2 m, got {}", self.block_pitch));
        }
        for (name, (lo, hi)) in [("block_height", self.block_height), ("pole_height", self.pole_height)] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo <= hi) {
                return bad(format!("{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})"));
            }
        }
        Ok(())
    }
}

/// Rounded-rectangle loop, arc-length parametrized counter-clockwise from
/// the middle of its bottom side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centerline {
    pub half: f64,
    pub radius: f64,
}

impl Centerline {
    pub fn length(&self) -> f64 {
        8.0 * (self.half - self.radius) + 2.0 * PI * self.radius
    }

    /// Point, unit tangent and signed curvature at arc length `s`.
    pub fn eval(&self, s: f64) -> ([f64; 2], [f64; 2], f64) {
        let (a, r) = (self.half, self.radius);
        let straight = 2.0 * (a - r);
        let arc = PI * r / 2.0;
        let side = straight + arc;
        // Shift so that side 0 starts at the bottom-right corner's straight end.
        let s = (s + (a - r)).rem_euclid(self.length());
        let k = ((s / side).floor() as usize).min(3);
        let u = s - k as f64 * side;
        // Side k: straight from corner k-1 to corner k, then the arc.
        let base = PI / 2.0 * k as f64;
        let (c, sn) = (base.cos(), base.sin());
        let rot = |p: [f64; 2]| [c * p[0] - sn * p[1], sn * p[0] + c * p[1]];
        let (p, t, kappa) = if u < straight {
            ([-(a - r) + u, -a], [1.0, 0.0], 0.0)
        } else {
            let phi = (u - straight) / r;
            let center = [a - r, -(a - r)];
            let ang = -PI / 2.0 + phi;
            (
                [center[0] + r * ang.cos(), center[1] + r * ang.sin()],
                [-ang.sin(), ang.cos()],
                1.0 / r,
            )
        };
        (rot(p), rot(t), kappa)
    }

    /// Points spaced at most `step` apart along the loop.
    pub fn samples(&self, step: f64) -> Vec<[f64; 2]> {
        let n = (self.length() / step).ceil() as usize;
        (0..n)
            .map(|i| self.eval(i as f64 * self.length() / n as f64).0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub seed: u64,
    pub params: WorldParams,
    pub obstacles: Vec<Obstacle>,
}

impl WorldModel {
    pub fn extent(&self) -> f64 {
        self.params.extent
    }

    pub fn empty(params: WorldParams) -> Self {
        WorldModel {
            seed: 0,
            params,
            obstacles: Vec::new(),
        }
    }

    pub fn in_collision(&self, p: [f64; 2]) -> bool {
        self.obstacles.iter().any(|o| o.contains(p))
    }

    pub fn clearance(&self, p: [f64; 2]) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.distance(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        for o in &self.obstacles {
            o.validate(self.params.extent)?;
        }
        Ok(())
    }
}

const CORRIDOR_MARGIN: f64 = 0.25;
const MIN_BLOCK_SIDE: f64 = 1.5;

/// Builds a street-like world from `seed`.
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<WorldModel> {
    params.validate()?;
    let mut rng = seed::rng(seed, &[0x776f726c64]);
    let e2 = params.extent / 2.0;
    let a = params.loop_half();
    let hw = params.corridor_width() / 2.0;
    let samples = params.centerline().samples(0.1);
    let keep_out = hw + CORRIDOR_MARGIN;
    let clear_of_corridor = |o: &Obstacle| samples.iter().all(|&p| o.distance(p) >= keep_out);

    let inner = a - hw;
    let outer = a + hw;
    let regions = [
        (-inner, -inner, inner, inner),
        (-e2, outer, e2, e2),
        (-e2, -e2, e2, -outer),
        (-e2, -outer, -outer, outer),
        (outer, -outer, e2, outer),
    ];
    let mut obstacles = Vec::new();
    for (x0, y0, x1, y1) in regions {
        let nx = ((x1 - x0) / params.block_pitch).round().max(1.0) as usize;
        let ny = ((y1 - y0) / params.block_pitch).round().max(1.0) as usize;
        let (cw, ch) = ((x1 - x0) / nx as f64, (y1 - y0) / ny as f64);
        for i in 0..nx {
            for j in 0..ny {
                // Draw every value even when the cell stays empty so that the
                // layout of one cell does not depend on another's outcome.
                let occupied = rng.random::<f64>() < params.block_density;
                let inset: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.5..3.0));
                let height = rng.random_range(params.block_height.0..=params.block_height.1);
                if !occupied {
                    continue;
                }
                let cx0 = x0 + i as f64 * cw;
                let cy0 = y0 + j as f64 * ch;
                let mut r = [cx0 + inset[0], cy0 + inset[1], cx0 + cw - inset[2], cy0 + ch - inset[3]];
                for _ in 0..12 {
                    if r[2] - r[0] < MIN_BLOCK_SIDE || r[3] - r[1] < MIN_BLOCK_SIDE {
                        break;
                    }
                    let block = Obstacle::rect(r[0], r[1], r[2], r[3], 0.0, height);
                    if clear_of_corridor(&block) {
                        obstacles.push(block);
                        break;
                    }
                    // Shrink toward the corner farthest from the loop.
                    let corners = [[r[0], r[1]], [r[2], r[1]], [r[2], r[3]], [r[0], r[3]]];
                    let far = corners
                        .iter()
                        .copied()
                        .max_by(|p, q| dist_to(&samples, *p).total_cmp(&dist_to(&samples, *q)))
                        .unwrap();
                    for k in 0..4 {
                        let anchor = far[k % 2];
                        r[k] = anchor + 0.8 * (r[k] - anchor);
                    }
                }
            }
        }
    }

    let pole_count = (params.pole_density * params.extent * params.extent).round() as usize;
    let blocks = obstacles.len();
    for _ in 0..pole_count {
        for _attempt in 0..20 {
            let x = rng.random_range(-e2 + 0.5..e2 - 0.5);
            let y = rng.random_range(-e2 + 0.5..e2 - 0.5);
            let r = rng.random_range(0.15..0.4);
            let h = rng.random_range(params.pole_height.0..=params.pole_height.1);
            let pole = Obstacle::disk(x, y, r, 8, 0.0, h);
            let near_block = obstacles[..blocks].iter().any(|o| o.distance([x, y]) < r + 0.5);
            if !near_block && clear_of_corridor(&pole) {
                obstacles.push(pole);
                break;
            }
        }
    }
    let world = WorldModel {
        seed,
        params: params.clone(),
        obstacles,
    };
    world.validate()?;
    Ok(world)
}

fn dist_to(samples: &[[f64; 2]], p: [f64; 2]) -> f64 {
    samples
        .iter()
        .map(|q| (p[0] - q[0]).hypot(p[1] - q[1]))
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centerline_is_continuous_and_closed() {
        let c = WorldParams::default().centerline();
        let n = 20_000;
        let len = c.length();
        let mut prev = c.eval(0.0).0;
        for i in 1..=n {
            let (p, t, _) = c.eval(len * i as f64 / n as f64);
            let step = (p[0] - prev[0]).hypot(p[1] - prev[1]);
            assert!((step - len / n as f64).abs() < 1e-6, "gap {step} at {i}");
            assert!((t[0].hypot(t[1]) - 1.0).abs() < 1e-12);
            prev = p;
        }
        let start = c.eval(0.0);
        assert!((start.0[0]).abs() < 1e-12 && (start.0[1] + c.half).abs() < 1e-12);
        assert_eq!(start.1, [1.0, 0.0]);
    }

    #[test]
    fn same_seed_same_world() {
        let p = WorldParams::default();
        let a = generate_world(7, &p).unwrap();
        assert_eq!(a, generate_world(7, &p).unwrap());
        assert_ne!(a.obstacles, generate_world(8, &p).unwrap().obstacles);
    }

    #[test]
    fn zero_density_is_empty() {
        let p = WorldParams {
            block_density: 0.0,
            pole_density: 0.0,
            ..WorldParams::default()
        };
        assert!(generate_world(3, &p).unwrap().obstacles.is_empty());
    }

    #[test]
    fn default_world_obstacles_inside_extent() {
        let w = generate_world(7, &WorldParams::default()).unwrap();
        assert!(w.obstacles.len() > 20);
        let h = w.extent() / 2.0;
        let bounds = Obstacle::rect(-h, -h, h, h, 0.0, 1.0);
        for o in &w.obstacles {
            assert!(o.vertices.iter().all(|&v| bounds.contains(v)));
            assert!(o.area() > 0.01);
        }
    }

    #[test]
    fn corridor_and_free_space() {
        let p = WorldParams::default();
        let w = generate_world(11, &p).unwrap();
        for q in p.centerline().samples(0.5) {
            assert!(w.clearance(q) >= p.corridor_width() / 2.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let h = p.extent / 2.0;
        let free = (0..n)
            .filter(|_| !w.in_collision([rng.random_range(-h..h), rng.random_range(-h..h)]))
            .count();
        assert!(free as f64 / n as f64 >= 0.2);
    }

    #[test]
    fn infeasible_params_rejected() {
        let small = WorldParams {
            extent: 10.0,
            ..WorldParams::default()
        };
        assert!(generate_world(1, &small).is_err());
        let wide = WorldParams {
            corridor_fraction: 0.5,
            ..WorldParams::default()
        };
        assert!(generate_world(1, &wide).is_err());
        let narrow = WorldParams {
            corridor_fraction: 0.02,
            ..WorldParams::default()
        };
        assert!(generate_world(1, &narrow).is_err());
        let tiny = WorldParams {
            extent: 20.0,
            ..WorldParams::default()
        };
        generate_world(1, &tiny).unwrap();
    }

    #[test]
    fn polygon_queries() {
        let sq = Obstacle::rect(0.0, 0.0, 2.0, 1.0, 0.0, 3.0);
        assert!((sq.area() - 2.0).abs() < 1e-12);
        assert!(sq.contains([1.0, 0.5]) && sq.contains([0.0, 0.0]));
        assert!(!sq.contains([2.1, 0.5]));
        assert!((sq.distance([3.0, 0.5]) - 1.0).abs() < 1e-12);
        assert!((sq.distance([5.0, 5.0]) - 5.0).abs() < 1e-12);
        let cw = Obstacle {
            vertices: sq.vertices.iter().rev().copied().collect(),
            ..sq.clone()
        };
        assert!(cw.validate(10.0).is_err());
    }
}
