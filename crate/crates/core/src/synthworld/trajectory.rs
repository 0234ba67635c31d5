use std::f64::consts::{PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::WorldModel;
use crate::error::{Error, Result};
use crate::geometry::{wrap, Pose2};
use crate::seed;

const MAX_YAW_STEP: f64 = 0.2;
const MIN_CLEARANCE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryParams {
    pub frames: usize,
    /// Distance advanced along the loop per frame, meters.
    pub speed: f64,
    /// Drive the loop clockwise instead of counter-clockwise.
    pub reverse: bool,
    /// Peak lateral weave as a fraction of the corridor half width.
    pub weave: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        TrajectoryParams {
            frames: 1500,
            speed: 0.5,
            reverse: false,
            weave: 0.3,
        }
    }
}

/// Drives the corridor loop with a smooth seeded lateral weave.
///
/// The start point, weave amplitude, phase and wave count are drawn from
/// `seed`. Fails when the result would turn more than 0.2 rad per frame or
/// pass within 0.5 m of an obstacle.
pub fn generate_trajectory(world: &WorldModel, params: &TrajectoryParams, seed: u64) -> Result<Vec<Pose2>> {
    world.params.validate()?;
    if params.frames == 0 {
        return Err(Error::InvalidArgument("trajectory needs at least one frame".into()));
    }
    if !(params.speed.is_finite() && params.speed > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "speed must be > 0, got {}",
            params.speed
        )));
    }
    if !(0.0..1.0).contains(&params.weave) {
        return Err(Error::InvalidArgument(format!(
            "weave must be in [0, 1), got {}",
            params.weave
        )));
    }
    let line = world.params.centerline();
    let len = line.length();
    let mut rng = seed::rng(seed, &[0x7472616a]);
    let s0 = rng.random_range(0.0..len);
    let amp = params.weave * world.params.corridor_width() / 2.0 * rng.random_range(0.5..=1.0);
    let waves = rng.random_range(1..=3) as f64;
    let phase = rng.random_range(0.0..TAU);
    let nu = TAU * waves / len;
    let dir = if params.reverse { -1.0 } else { 1.0 };

    let mut poses = Vec::with_capacity(params.frames);
    for i in 0..params.frames {
        let s = s0 + dir * params.speed * i as f64;
        let (c, t, kappa) = line.eval(s);
        let n = [-t[1], t[0]];
        let delta = amp * (nu * s + phase).sin();
        let ddelta = amp * nu * (nu * s + phase).cos();
        let p = [c[0] + delta * n[0], c[1] + delta * n[1]];
        // d/ds of c + δ·n with n' = −κ·t.
        let along = 1.0 - delta * kappa;
        let v = [along * t[0] + ddelta * n[0], along * t[1] + ddelta * n[1]];
        let mut yaw = v[1].atan2(v[0]);
        if params.reverse {
            yaw += PI;
        }
        let pose = Pose2::new(p[0], p[1], wrap(yaw));
        if world.clearance(p) < MIN_CLEARANCE {
            return Err(Error::NoFeasiblePath(format!(
                "frame {i} at ({:.2}, {:.2}) is within {MIN_CLEARANCE} m of an obstacle",
                p[0], p[1]
            )));
        }
        if let Some(prev) = poses.last() {
            let turn = wrap(pose.yaw() - Pose2::yaw(prev)).abs();
            if turn > MAX_YAW_STEP {
                return Err(Error::NoFeasiblePath(format!(
                    "frame {i} turns {turn:.3} rad, above {MAX_YAW_STEP}; lower the speed"
                )));
            }
        }
        poses.push(pose);
    }
    Ok(poses)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_world, WorldParams};
    use super::*;

    fn world() -> WorldModel {
        generate_world(7, &WorldParams::default()).unwrap()
    }

    #[test]
    fn single_frame() {
        let p = TrajectoryParams {
            frames: 1,
            ..TrajectoryParams::default()
        };
        let t = generate_trajectory(&world(), &p, 3).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn collision_free_smooth_deterministic() {
        let w = world();
        for reverse in [false, true] {
            let p = TrajectoryParams {
                reverse,
                ..TrajectoryParams::default()
            };
            let t = generate_trajectory(&w, &p, 11).unwrap();
            assert_eq!(t.len(), 1500);
            for pose in &t {
                assert!(!w.obstacles.iter().any(|o| o.contains([pose.x(), pose.y()])));
            }
            for pair in t.windows(2) {
                assert!(wrap(pair[1].yaw() - pair[0].yaw()).abs() <= 0.2);
                let step = pair[0].translation_distance(&pair[1]);
                assert!(step > 0.3 && step < 0.7, "step {step}");
            }
            assert_eq!(t, generate_trajectory(&w, &p, 11).unwrap());
        }
    }

    #[test]
    fn heading_follows_motion() {
        let w = world();
        for reverse in [false, true] {
            let p = TrajectoryParams {
                frames: 400,
                reverse,
                ..TrajectoryParams::default()
            };
            let t = generate_trajectory(&w, &p, 5).unwrap();
            for pair in t.windows(2) {
                let mv = (pair[1].y() - pair[0].y()).atan2(pair[1].x() - pair[0].x());
                assert!(wrap(mv - pair[0].yaw()).abs() < 0.15);
            }
        }
    }

    #[test]
    fn too_fast_is_infeasible() {
        let p = TrajectoryParams {
            frames: 400,
            speed: 5.0,
            ..TrajectoryParams::default()
        };
        assert!(matches!(
            generate_trajectory(&world(), &p, 1),
            Err(Error::NoFeasiblePath(_))
        ));
    }
}
