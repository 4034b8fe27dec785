use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Rigid transform. Used throughout as camera-from-world (`T_cw`) unless a
/// variable name says otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SE3Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from a rotation matrix, re-projecting it onto SO(3).
    pub fn from_matrix(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(rotation);
        Self {
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
            translation,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rinv = self.rotation.inverse();
        Self {
            rotation: rinv,
            translation: -(rinv * self.translation),
        }
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &SE3Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates for a camera-from-world pose.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    /// Left-multiplies by `exp(delta)` where `delta = (rho, phi)`: translation
    /// first, then rotation vector. The rotation and translation parts are
    /// applied separately (the SO(3) x R3 retraction), which matches the
    /// Jacobians used by the optimizers.
    pub fn retract(&self, delta: &[f64; 6]) -> Self {
        let rho = Vector3::new(delta[0], delta[1], delta[2]);
        let phi = Vector3::new(delta[3], delta[4], delta[5]);
        let dr = UnitQuaternion::from_scaled_axis(phi);
        let mut rotation = dr * self.rotation;
        rotation.renormalize();
        Self {
            rotation,
            translation: dr * self.translation + rho,
        }
    }

    pub fn to_sim3(&self) -> Sim3Transform {
        Sim3Transform {
            scale: 1.0,
            rotation: self.rotation,
            translation: self.translation,
        }
    }

    /// Angle of the rotation in radians.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    /// Max deviation of `R Rᵀ` from identity, plus `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation_matrix();
        let e = (r * r.transpose() - Matrix3::identity()).abs().max();
        e.max((r.determinant() - 1.0).abs())
    }
}

/// 7-DoF similarity: `apply(p) = s R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3Transform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Sim3Transform {
    fn default() -> Self {
        Self::identity()
    }
}

impl Sim3Transform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Sim3Transform) -> Sim3Transform {
        Sim3Transform {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Sim3Transform {
        let rinv = self.rotation.inverse();
        let sinv = 1.0 / self.scale;
        Sim3Transform {
            scale: sinv,
            rotation: rinv,
            translation: -(rinv * self.translation) * sinv,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        *self.rotation.to_rotation_matrix().matrix()
    }

    /// Expresses a camera-from-world pose of a world that has been mapped by
    /// `self` (new_world = self(old_world)). The camera stays physically put,
    /// so the result is still rigid.
    pub fn transform_camera_pose(&self, t_cw: &SE3Pose) -> SE3Pose {
        let center = self.apply(&t_cw.center());
        let rotation = t_cw.rotation * self.rotation.inverse();
        SE3Pose {
            rotation,
            translation: -(rotation * center),
        }
    }

    /// Seven-vector that vanishes exactly at the identity:
    /// `(translation, rotation vector, ln scale)`.
    pub fn residual_vector(&self) -> [f64; 7] {
        let phi = self.rotation.scaled_axis();
        [
            self.translation.x,
            self.translation.y,
            self.translation.z,
            phi.x,
            phi.y,
            phi.z,
            self.scale.ln(),
        ]
    }

    /// Left perturbation by `(dt, dphi, ds)` in the same layout as
    /// [`Sim3Transform::residual_vector`].
    pub fn retract(&self, delta: &[f64]) -> Sim3Transform {
        let dt = Vector3::new(delta[0], delta[1], delta[2]);
        let dphi = Vector3::new(delta[3], delta[4], delta[5]);
        let ds = delta[6].exp();
        let dr = UnitQuaternion::from_scaled_axis(dphi);
        let mut rotation = dr * self.rotation;
        rotation.renormalize();
        Sim3Transform {
            scale: ds * self.scale,
            rotation,
            translation: ds * (dr * self.translation) + dt,
        }
    }
}

/// Plain-array mirror used for serialization (quaternion as `[x, y, z, w]`).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PoseRecord {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<&SE3Pose> for PoseRecord {
    fn from(p: &SE3Pose) -> Self {
        let q = p.rotation.quaternion();
        PoseRecord {
            q: [q.i, q.j, q.k, q.w],
            t: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl From<&PoseRecord> for SE3Pose {
    fn from(r: &PoseRecord) -> Self {
        let q = nalgebra::Quaternion::new(r.q[3], r.q[0], r.q[1], r.q[2]);
        SE3Pose {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: Vector3::new(r.t[0], r.t[1], r.t[2]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sim3(rng: &mut ChaCha8Rng) -> Sim3Transform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Sim3Transform::new(
            rng.random_range(0.2..5.0),
            UnitQuaternion::from_scaled_axis(axis * 2.0),
            Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ),
        )
    }

    #[test]
    fn identity_compose_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_sim3(&mut rng);
        let c = Sim3Transform::identity().compose(&t);
        assert!((c.scale - t.scale).abs() < 1e-15);
        assert!((c.translation - t.translation).norm() < 1e-15);
        assert!(c.rotation.angle_to(&t.rotation) < 1e-15);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let t = random_sim3(&mut rng);
            let c = t.compose(&t.inverse());
            assert!((c.scale - 1.0).abs() < 1e-12);
            assert!(c.translation.norm() < 1e-12);
            assert!(c.rotation.angle() < 1e-12);
        }
    }

    #[test]
    fn compose_applies_right_operand_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let a = random_sim3(&mut rng);
            let b = random_sim3(&mut rng);
            let p = Vector3::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            let lhs = a.compose(&b).apply(&p);
            let rhs = a.apply(&b.apply(&p));
            assert!((lhs - rhs).norm() < 1e-10);
        }
    }

    #[test]
    fn se3_inverse_and_center() {
        let pose = SE3Pose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.1, -0.4, 0.3)),
            Vector3::new(1.0, 2.0, -3.0),
        );
        let c = pose.center();
        assert!(pose.transform_point(&c).norm() < 1e-12);
        let id = pose.compose(&pose.inverse());
        assert!(id.translation.norm() < 1e-12 && id.rotation.angle() < 1e-12);
        assert!(pose.orthonormality_error() < 1e-12);
    }

    #[test]
    fn transformed_camera_sees_scaled_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_sim3(&mut rng);
        let pose = SE3Pose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(0.2, 0.1, -0.3)),
            Vector3::new(0.5, -1.0, 2.0),
        );
        let x = Vector3::new(1.0, 0.3, 4.0);
        let new_pose = t.transform_camera_pose(&pose);
        let pc = pose.transform_point(&x);
        let pc_new = new_pose.transform_point(&t.apply(&x));
        assert!((pc_new - pc * t.scale).norm() < 1e-10);
    }

    #[test]
    fn retract_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_sim3(&mut rng);
        let r = t.retract(&[0.0; 7]);
        assert!((r.translation - t.translation).norm() < 1e-14);
        let v = Sim3Transform::identity().residual_vector();
        assert!(v.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn pose_record_round_trip() {
        let pose = SE3Pose::new(
            UnitQuaternion::from_scaled_axis(Vector3::new(-0.7, 0.2, 0.9)),
            Vector3::new(3.0, 0.1, -0.2),
        );
        let back = SE3Pose::from(&PoseRecord::from(&pose));
        assert!(back.rotation.angle_to(&pose.rotation) < 1e-14);
        assert!((back.translation - pose.translation).norm() < 1e-14);
    }
}
