use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{cross, sub, WorldModel};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Pose2};
use crate::seed;

/// Multi-ring planar LiDAR: `beams` evenly spaced azimuths per ring, each
/// ring a horizontal fan at a fixed height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub beams: usize,
    pub ring_heights: Vec<f64>,
    pub max_range: f64,
    pub range_noise_std: f64,
    pub dropout_prob: f64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            beams: 360,
            ring_heights: vec![0.3, 0.8, 1.3, 1.8, 2.5, 3.5, 5.0, 7.0],
            max_range: 60.0,
            range_noise_std: 0.02,
            dropout_prob: 0.01,
        }
    }
}

impl ScanConfig {
    pub fn rings(&self) -> usize {
        self.ring_heights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.beams < 8 {
            return bad(format!("scan needs at least 8 beams, got {}", self.beams));
        }
        if self.ring_heights.is_empty() || self.ring_heights.iter().any(|h| !h.is_finite()) {
            return bad("scan needs at least one finite ring height".into());
        }
        if !(self.max_range.is_finite() && self.max_range > 0.0) {
            return bad(format!("max_range must be > 0, got {}", self.max_range));
        }
        if !(self.range_noise_std.is_finite() && self.range_noise_std >= 0.0) {
            return bad(format!("range_noise_std must be >= 0, got {}", self.range_noise_std));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return bad(format!("dropout_prob must be in [0, 1], got {}", self.dropout_prob));
        }
        Ok(())
    }
}

/// Nearest hit distance of the ray `origin + t·(cos θ, sin θ)` against
/// obstacles spanning height `z`, if any lies within `max_range`.
pub fn cast_ray(world: &WorldModel, origin: [f64; 2], theta: f64, z: f64, max_range: f64) -> Option<f64> {
    let d = [theta.cos(), theta.sin()];
    let mut best = max_range;
    let mut hit = false;
    for o in &world.obstacles {
        if !o.height_overlaps(z) {
            continue;
        }
        for (p, q) in o.edges() {
            let e = sub(q, p);
            let denom = cross(d, e);
            if denom.abs() < 1e-15 {
                continue;
            }
            let w = sub(p, origin);
            let t = cross(w, e) / denom;
            let u = cross(w, d) / denom;
            if t > 1e-9 && t <= best && (0.0..=1.0).contains(&u) {
                best = t;
                hit = true;
            }
        }
    }
    hit.then_some(best)
}

/// Simulates one scan at `pose`; points are returned in the sensor frame.
pub fn simulate_scan(world: &WorldModel, pose: &Pose2, cfg: &ScanConfig, rng_seed: u64) -> Result<PointCloud> {
    cfg.validate()?;
    let origin = [pose.x(), pose.y()];
    if world.in_collision(origin) {
        return Err(Error::PoseInCollision {
            x: pose.x(),
            y: pose.y(),
        });
    }
    let mut rng = seed::rng(rng_seed, &[]);
    let mut pts = Vec::new();
    for &z in &cfg.ring_heights {
        for b in 0..cfg.beams {
            let alpha = 2.0 * std::f64::consts::PI * b as f64 / cfg.beams as f64;
            // Draw both variates for every beam so the stream stays aligned
            // whatever the geometry.
            let drop = rng.random::<f64>() < cfg.dropout_prob;
            let noise: f64 = StandardNormal.sample(&mut rng);
            let Some(r) = cast_ray(world, origin, pose.yaw() + alpha, z, cfg.max_range) else {
                continue;
            };
            let r = r + cfg.range_noise_std * noise;
            if drop || r <= 0.0 {
                continue;
            }
            pts.push([r * alpha.cos(), r * alpha.sin(), z]);
        }
    }
    PointCloud::new(pts)
}

#[cfg(test)]
mod tests {
    use super::super::{Obstacle, WorldParams};
    use super::*;
    use crate::geometry::transform_cloud;

    fn world_with(obstacles: Vec<Obstacle>) -> WorldModel {
        WorldModel {
            obstacles,
            ..WorldModel::empty(WorldParams::default())
        }
    }

    fn noiseless() -> ScanConfig {
        ScanConfig {
            range_noise_std: 0.0,
            dropout_prob: 0.0,
            ..ScanConfig::default()
        }
    }

    #[test]
    fn empty_world_gives_empty_cloud() {
        let w = world_with(vec![]);
        let c = simulate_scan(&w, &Pose2::identity(), &ScanConfig::default(), 1).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn wall_ranges_match_analytic_intersection() {
        // Wall x = 10 spanning y in [-20, 20].
        let w = world_with(vec![Obstacle::rect(10.0, -20.0, 11.0, 20.0, 0.0, 10.0)]);
        let pose = Pose2::new(0.0, 0.0, 0.3);
        let c = simulate_scan(&w, &pose, &noiseless(), 2).unwrap();
        assert!(!c.is_empty());
        for p in c.points() {
            let r = p[0].hypot(p[1]);
            let theta = pose.yaw() + p[1].atan2(p[0]);
            // Distance to the plane x = 10 along direction theta.
            let exact = 10.0 / theta.cos();
            assert!((r - exact).abs() < 1e-9, "{r} vs {exact}");
        }
    }

    #[test]
    fn ring_heights_filter_hits() {
        let w = world_with(vec![Obstacle::rect(5.0, -30.0, 6.0, 30.0, 0.0, 1.0)]);
        let c = simulate_scan(&w, &Pose2::identity(), &noiseless(), 3).unwrap();
        assert!(c.points().iter().all(|p| p[2] <= 1.0));
        assert!(c.points().iter().any(|p| p[2] == 0.3) && c.points().iter().any(|p| p[2] == 0.8));
    }

    #[test]
    fn range_noise_statistics() {
        let box_world = world_with(vec![
            Obstacle::rect(20.0, -25.0, 21.0, 25.0, 0.0, 10.0),
            Obstacle::rect(-21.0, -25.0, -20.0, 25.0, 0.0, 10.0),
            Obstacle::rect(-25.0, 20.0, 25.0, 21.0, 0.0, 10.0),
            Obstacle::rect(-25.0, -21.0, 25.0, -20.0, 0.0, 10.0),
        ]);
        let cfg = ScanConfig {
            beams: 3125,
            ring_heights: vec![1.0; 8],
            dropout_prob: 0.0,
            ..ScanConfig::default()
        };
        let clean_cfg = ScanConfig {
            range_noise_std: 0.0,
            ..cfg.clone()
        };
        let pose = Pose2::new(1.0, -2.0, 0.1);
        let clean = simulate_scan(&box_world, &pose, &clean_cfg, 0).unwrap();
        let mut resid = Vec::new();
        for s in 0..4 {
            let noisy = simulate_scan(&box_world, &pose, &cfg, 100 + s).unwrap();
            assert_eq!(noisy.len(), clean.len());
            for (a, b) in noisy.points().iter().zip(clean.points()) {
                resid.push(a[0].hypot(a[1]) - b[0].hypot(b[1]));
            }
        }
        assert_eq!(resid.len(), 100_000);
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.0196..=0.0204).contains(&std), "std {std}");
    }

    #[test]
    fn noiseless_points_lie_on_boundaries() {
        let world = super::super::generate_world(5, &WorldParams::default()).unwrap();
        let pose = Pose2::new(0.0, -world.params.loop_half(), 0.0);
        let c = simulate_scan(&world, &pose, &noiseless(), 4).unwrap();
        assert!(c.len() > 500);
        for p in transform_cloud(&pose, &c).points() {
            let d = world
                .obstacles
                .iter()
                .filter(|o| o.height_overlaps(p[2]))
                .map(|o| o.distance([p[0], p[1]]))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-6, "point {p:?} is {d} from every boundary");
        }
    }

    #[test]
    fn collision_and_determinism() {
        let w = world_with(vec![Obstacle::rect(-1.0, -1.0, 1.0, 1.0, 0.0, 2.0)]);
        assert!(matches!(
            simulate_scan(&w, &Pose2::identity(), &ScanConfig::default(), 1),
            Err(Error::PoseInCollision { .. })
        ));
        let world = super::super::generate_world(6, &WorldParams::default()).unwrap();
        let pose = Pose2::new(0.0, -world.params.loop_half(), 1.0);
        let a = simulate_scan(&world, &pose, &ScanConfig::default(), 9).unwrap();
        let b = simulate_scan(&world, &pose, &ScanConfig::default(), 9).unwrap();
        assert_eq!(a, b);
    }
}
