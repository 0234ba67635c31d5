//! Planar rigid-body poses and point clouds.
//!
//! Frames are right-handed with the x-y plane on the ground; yaw is
//! counter-clockwise about +z. Point clouds keep their z coordinate, which
//! passes through planar transforms unchanged.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> Result<f64> {
    if !theta.is_finite() {
        return Err(Error::InvalidArgument(format!("cannot wrap non-finite angle {theta}")));
    }
    Ok(wrap(theta))
}

/// Infallible variant for values already known to be finite.
pub(crate) fn wrap(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = theta.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// A planar pose `(x, y, yaw)` in meters and radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPose", into = "RawPose")]
pub struct Pose2 {
    x: f64,
    y: f64,
    yaw: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPose {
    x: f64,
    y: f64,
    yaw: f64,
}

impl TryFrom<RawPose> for Pose2 {
    type Error = Error;

    fn try_from(raw: RawPose) -> Result<Self> {
        Pose2::try_new(raw.x, raw.y, raw.yaw)
    }
}

impl From<Pose2> for RawPose {
    fn from(p: Pose2) -> Self {
        RawPose {
            x: p.x,
            y: p.y,
            yaw: p.yaw,
        }
    }
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose2 {
    pub const fn identity() -> Self {
        Pose2 {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
        }
    }

    /// Builds a pose, wrapping `yaw`. Inputs are expected to be finite.
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite() && yaw.is_finite());
        Pose2 { x, y, yaw: wrap(yaw) }
    }

    pub fn try_new(x: f64, y: f64, yaw: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "pose position must be finite, got ({x}, {y})"
            )));
        }
        Ok(Pose2 {
            x,
            y,
            yaw: wrap_angle(yaw)?,
        })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn yaw(&self) -> f64 {
        self.yaw
    }

    /// `self ⊕ other`: applies `other` expressed in this pose's frame.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2 {
            x: self.x + c * other.x - s * other.y,
            y: self.y + s * other.x + c * other.y,
            yaw: wrap(self.yaw + other.yaw),
        }
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2 {
            x: -(c * self.x + s * self.y),
            y: s * self.x - c * self.y,
            yaw: wrap(-self.yaw),
        }
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1], p[2]]
    }

    pub fn translation_distance(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

pub fn compose(a: &Pose2, b: &Pose2) -> Pose2 {
    a.compose(b)
}

pub fn inverse(p: &Pose2) -> Pose2 {
    p.inverse()
}

/// A set of 3D points in meters. All coordinates are finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "point {i} has non-finite coordinates {:?}",
                points[i]
            )));
        }
        Ok(PointCloud { points })
    }

    pub(crate) fn from_finite(points: Vec<[f64; 3]>) -> Self {
        debug_assert!(points.iter().flatten().all(|v| v.is_finite()));
        PointCloud { points }
    }

    pub fn empty() -> Self {
        PointCloud::default()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<[f64; 3]> {
        self.points
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }

    /// Axis-aligned bounds `(min, max)`, or `None` for an empty cloud.
    pub fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(mut lo, mut hi), p| {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
            (lo, hi)
        }))
    }
}

/// Rotates every point by the pose yaw about z, then translates by `(x, y)`.
pub fn transform_cloud(pose: &Pose2, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.transform_point(*p)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// 3×3 homogeneous matrix of a pose, used as an independent oracle.
    fn mat(p: &Pose2) -> [[f64; 3]; 3] {
        let (s, c) = p.yaw().sin_cos();
        [[c, -s, p.x()], [s, c, p.y()], [0.0, 0.0, 1.0]]
    }

    fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        out
    }

    fn from_mat(m: &[[f64; 3]; 3]) -> Pose2 {
        Pose2::new(m[0][2], m[1][2], m[1][0].atan2(m[0][0]))
    }

    fn assert_pose_close(a: &Pose2, b: &Pose2, tol: f64) {
        assert!((a.x() - b.x()).abs() < tol, "{a:?} vs {b:?}");
        assert!((a.y() - b.y()).abs() < tol, "{a:?} vs {b:?}");
        let dyaw = wrap(a.yaw() - b.yaw());
        assert!(dyaw.abs() < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn compose_examples() {
        let p = Pose2::new(1.5, -2.0, 0.3);
        assert_eq!(Pose2::identity().compose(&p), p);

        let a = Pose2::new(1.0, 0.0, PI / 2.0);
        let b = Pose2::new(1.0, 0.0, 0.0);
        let oracle = from_mat(&matmul(&mat(&a), &mat(&b)));
        let got = a.compose(&b);
        assert_pose_close(&got, &oracle, 1e-12);
        assert_pose_close(&got, &Pose2::new(1.0, 1.0, PI / 2.0), 1e-12);

        assert_pose_close(&p.compose(&p.inverse()), &Pose2::identity(), 1e-9);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(Pose2::identity().inverse(), Pose2::identity());
        let r = Pose2::new(0.0, 0.0, 0.7).inverse();
        assert_pose_close(&r, &Pose2::new(0.0, 0.0, -0.7), 1e-15);

        let p = Pose2::new(2.0, 3.0, PI / 2.0);
        // Rigid inverse of [R t] is [Rᵀ −Rᵀt].
        let m = mat(&p);
        let rt = [[m[0][0], m[1][0]], [m[0][1], m[1][1]]];
        let tx = -(rt[0][0] * m[0][2] + rt[0][1] * m[1][2]);
        let ty = -(rt[1][0] * m[0][2] + rt[1][1] * m[1][2]);
        let inv = p.inverse();
        assert_pose_close(&inv, &Pose2::new(tx, ty, -PI / 2.0), 1e-12);
        assert_pose_close(&inv, &Pose2::new(-3.0, 2.0, -PI / 2.0), 1e-12);
    }

    #[test]
    fn transform_cloud_examples() {
        let c = PointCloud::new(vec![[1.0, 2.0, 3.0], [-4.0, 0.5, 0.0]]).unwrap();
        assert_eq!(transform_cloud(&Pose2::identity(), &c), c);

        let one = PointCloud::new(vec![[0.0, 0.0, 5.0]]).unwrap();
        let t = transform_cloud(&Pose2::new(1.0, 1.0, 0.0), &one);
        assert_eq!(t.points(), &[[1.0, 1.0, 5.0]]);

        let one = PointCloud::new(vec![[1.0, 0.0, 2.0]]).unwrap();
        let t = transform_cloud(&Pose2::new(0.0, 0.0, PI / 2.0), &one);
        let p = t.points()[0];
        assert!(p[0].abs() < 1e-15 && (p[1] - 1.0).abs() < 1e-15 && p[2] == 2.0);
    }

    #[test]
    fn wrap_angle_examples() {
        assert_eq!(wrap_angle(0.0).unwrap(), 0.0);
        assert!((wrap_angle(3.0 * PI).unwrap() - PI).abs() < 1e-12);
        // Oracle: repeatedly add 2π until inside the interval.
        let mut t = -3.5 * PI;
        while t <= -PI {
            t += TAU;
        }
        let got = wrap_angle(-3.5 * PI).unwrap();
        assert!((got - t).abs() < 1e-12 && (got - 0.5 * PI).abs() < 1e-12);
        assert_eq!(wrap_angle(-PI).unwrap(), PI);
        assert!(wrap_angle(f64::NAN).is_err());
        assert!(wrap_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        assert!(Pose2::try_new(f64::INFINITY, 0.0, 0.0).is_err());
    }

    fn pose() -> impl Strategy<Value = Pose2> {
        (-100.0..100.0f64, -100.0..100.0f64, -10.0..10.0f64).prop_map(|(x, y, t)| Pose2::new(x, y, t))
    }

    proptest! {
        #[test]
        fn compose_is_associative(a in pose(), b in pose(), c in pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.x() - r.x()).abs() < 1e-9);
            prop_assert!((l.y() - r.y()).abs() < 1e-9);
            prop_assert!(wrap(l.yaw() - r.yaw()).abs() < 1e-9);
        }

        #[test]
        fn inverse_round_trip(p in pose()) {
            let id = p.compose(&p.inverse());
            prop_assert!(id.x().abs() < 1e-9 && id.y().abs() < 1e-9);
            prop_assert!(wrap(id.yaw()).abs() < 1e-9);
        }

        #[test]
        fn yaw_stays_in_range(p in pose(), q in pose()) {
            for r in [p, p.inverse(), p.compose(&q)] {
                prop_assert!(r.yaw() > -PI && r.yaw() <= PI);
            }
        }

        #[test]
        fn cloud_round_trip(p in pose(), pts in prop::collection::vec(
            (-50.0..50.0f64, -50.0..50.0f64, -5.0..5.0f64), 0..20)) {
            let c = PointCloud::new(pts.into_iter().map(|(x, y, z)| [x, y, z]).collect()).unwrap();
            let back = transform_cloud(&p.inverse(), &transform_cloud(&p, &c));
            for (a, b) in back.points().iter().zip(c.points()) {
                for k in 0..3 {
                    prop_assert!((a[k] - b[k]).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn wrap_is_idempotent(t in -1e4..1e4f64) {
            let w = wrap_angle(t).unwrap();
            prop_assert_eq!(wrap_angle(w).unwrap(), w);
            prop_assert!(w > -PI && w <= PI);
            let k = ((t - w) / TAU).round();
            prop_assert!((t - w - k * TAU).abs() < 1e-9);
        }
    }
}
