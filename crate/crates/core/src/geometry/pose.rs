use std::f64::consts::PI;

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// End-effector (or part) pose: position in meters, orientation as intrinsic
/// Z-Y-X angles in radians. Composition goes through a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose6 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub theta_x: f64,
    pub theta_y: f64,
    pub theta_z: f64,
}

impl Pose6 {
    pub const IDENTITY: Pose6 = Pose6 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        theta_x: 0.0,
        theta_y: 0.0,
        theta_z: 0.0,
    };

    pub fn new(x: f64, y: f64, z: f64, theta_x: f64, theta_y: f64, theta_z: f64) -> Self {
        Pose6 {
            x,
            y,
            z,
            theta_x: wrap_angle(theta_x),
            theta_y: wrap_angle(theta_y),
            theta_z: wrap_angle(theta_z),
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Pose6::new(x, y, z, 0.0, 0.0, 0.0)
    }

    pub fn planar(x: f64, y: f64, theta_z: f64) -> Self {
        Pose6::new(x, y, 0.0, 0.0, 0.0, theta_z)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x, self.y, self.z, self.theta_x, self.theta_y, self.theta_z]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Pose6::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        // nalgebra's (roll, pitch, yaw) is Rz(yaw) * Ry(pitch) * Rx(roll),
        // i.e. intrinsic Z-Y-X.
        UnitQuaternion::from_euler_angles(self.theta_x, self.theta_y, self.theta_z)
    }

    pub fn to_isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(self.x, self.y, self.z),
            self.rotation(),
        )
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let (rx, ry, rz) = iso.rotation.euler_angles();
        let t = iso.translation.vector;
        Pose6::new(t.x, t.y, t.z, rx, ry, rz)
    }

    /// `self ⊕ other`: `other` is expressed in the frame of `self`.
    pub fn compose(&self, other: &Pose6) -> Pose6 {
        Pose6::from_isometry(&(self.to_isometry() * other.to_isometry()))
    }

    pub fn inverse(&self) -> Pose6 {
        Pose6::from_isometry(&self.to_isometry().inverse())
    }

    /// Pose of `other` expressed in the frame of `self`.
    pub fn relative(&self, other: &Pose6) -> Pose6 {
        Pose6::from_isometry(&(self.to_isometry().inverse() * other.to_isometry()))
    }

    /// Angle between this frame's z axis and the parent z axis.
    pub fn tilt_angle(&self) -> f64 {
        let z = self.rotation() * Vector3::z();
        z.z.clamp(-1.0, 1.0).acos()
    }

    /// Rotates a planar vector by `theta_z` (the heading of this pose).
    pub fn heading_to_parent(&self, v: Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta_z.sin_cos();
        Vector2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn parent_to_heading(&self, v: Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta_z.sin_cos();
        Vector2::new(c * v.x + s * v.y, -s * v.x + c * v.y)
    }

    /// Componentwise sum with angles wrapped.
    pub fn offset_by(&self, d: &Pose6) -> Pose6 {
        Pose6::new(
            self.x + d.x,
            self.y + d.y,
            self.z + d.z,
            self.theta_x + d.theta_x,
            self.theta_y + d.theta_y,
            self.theta_z + d.theta_z,
        )
    }
}

/// Expresses a parent-frame point in the frame of `eef_pose`.
pub fn transform_to_eef(world_point: &Point3<f64>, eef_pose: &Pose6) -> Point3<f64> {
    eef_pose.to_isometry().inverse_transform_point(world_point)
}

pub fn transform_to_world(eef_point: &Point3<f64>, eef_pose: &Pose6) -> Point3<f64> {
    eef_pose.to_isometry().transform_point(eef_point)
}

/// The five-component correction `(x, y, θx, θy, θz)` that moves a pose onto
/// a goal. Translation is expressed in the heading frame of the current pose
/// (its x/y axes rotated by `theta_z`); angles are plain differences.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrectiveAction {
    pub dx: f64,
    pub dy: f64,
    pub dtheta_x: f64,
    pub dtheta_y: f64,
    pub dtheta_z: f64,
}

impl CorrectiveAction {
    pub const ZERO: CorrectiveAction = CorrectiveAction {
        dx: 0.0,
        dy: 0.0,
        dtheta_x: 0.0,
        dtheta_y: 0.0,
        dtheta_z: 0.0,
    };

    /// `goal − current` restricted to the five labelled components.
    pub fn between(current: &Pose6, goal: &Pose6) -> Self {
        let d = current.parent_to_heading(Vector2::new(goal.x - current.x, goal.y - current.y));
        CorrectiveAction {
            dx: d.x,
            dy: d.y,
            dtheta_x: wrap_angle(goal.theta_x - current.theta_x),
            dtheta_y: wrap_angle(goal.theta_y - current.theta_y),
            dtheta_z: wrap_angle(goal.theta_z - current.theta_z),
        }
    }

    /// Applies the correction to `current`; `dz` is added to z unchanged.
    pub fn apply_to(&self, current: &Pose6, dz: f64) -> Pose6 {
        let d = current.heading_to_parent(Vector2::new(self.dx, self.dy));
        Pose6::new(
            current.x + d.x,
            current.y + d.y,
            current.z + dz,
            current.theta_x + self.dtheta_x,
            current.theta_y + self.dtheta_y,
            current.theta_z + self.dtheta_z,
        )
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.dx, self.dy, self.dtheta_x, self.dtheta_y, self.dtheta_z]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        CorrectiveAction {
            dx: a[0],
            dy: a[1],
            dtheta_x: a[2],
            dtheta_y: a[3],
            dtheta_z: a[4],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// True when every component lies inside the sampling box.
    pub fn within_box(&self, b0: f64, c0: f64) -> bool {
        self.dx.abs() <= b0
            && self.dy.abs() <= b0
            && self.dtheta_x.abs() <= c0
            && self.dtheta_y.abs() <= c0
            && self.dtheta_z.abs() <= c0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose6 {
        Pose6::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-PI..PI),
            rng.random_range(-1.5..1.5),
            rng.random_range(-PI..PI),
        )
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(wrap_angle(0.25), 0.25);
    }

    #[test]
    fn eef_origin_maps_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let p = Point3::new(pose.x, pose.y, pose.z);
            let local = transform_to_eef(&p, &pose);
            assert!(local.coords.norm() < 1e-12);
        }
    }

    #[test]
    fn identity_pose_leaves_points_alone() {
        let p = Point3::new(0.3, -0.2, 0.1);
        assert_eq!(transform_to_eef(&p, &Pose6::IDENTITY), p);
    }

    #[test]
    fn round_trip_and_rigidity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pose = random_pose(&mut rng);
        let mut prev: Option<(Point3<f64>, Point3<f64>)> = None;
        for _ in 0..100 {
            let p = Point3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let local = transform_to_eef(&p, &pose);
            let back = transform_to_world(&local, &pose);
            assert!((back - p).norm() < 1e-12);
            if let Some((q, ql)) = prev {
                let d_world = (p - q).norm();
                let d_local = (local - ql).norm();
                assert!((d_world - d_local).abs() < 1e-12);
            }
            prev = Some((p, local));
        }
    }

    #[test]
    fn euler_extraction_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let back = Pose6::from_isometry(&pose.to_isometry());
            for (a, b) in pose.to_array().iter().zip(back.to_array()) {
                assert!((a - b).abs() < 1e-9, "{pose:?} vs {back:?}");
            }
        }
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let id = a.compose(&a.inverse());
            for v in id.to_array() {
                assert!(v.abs() < 1e-12);
            }
            let b = random_pose(&mut rng);
            let rel = a.relative(&b);
            let again = a.compose(&rel);
            for (u, v) in again.to_array().iter().zip(b.to_array()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn correction_reproduces_goal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let goal = random_pose(&mut rng);
            let cur = random_pose(&mut rng);
            let d = CorrectiveAction::between(&cur, &goal);
            let reached = d.apply_to(&cur, 0.0);
            assert!((reached.x - goal.x).abs() < 1e-12);
            assert!((reached.y - goal.y).abs() < 1e-12);
            assert!(wrap_angle(reached.theta_x - goal.theta_x).abs() < 1e-12);
            assert!(wrap_angle(reached.theta_y - goal.theta_y).abs() < 1e-12);
            assert!(wrap_angle(reached.theta_z - goal.theta_z).abs() < 1e-12);
            assert_eq!(reached.z, cur.z);
        }
    }

    #[test]
    fn correction_is_heading_relative() {
        let cur = Pose6::planar(0.0, 0.0, PI / 2.0);
        let goal = Pose6::planar(0.0, 0.01, PI / 2.0);
        let d = CorrectiveAction::between(&cur, &goal);
        assert!((d.dx - 0.01).abs() < 1e-15);
        assert!(d.dy.abs() < 1e-15);
    }
}
