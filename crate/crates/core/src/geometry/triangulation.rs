use nalgebra::Vector3;

use super::GeometryError;
use crate::camera::SE3Pose;

pub const MIN_PARALLAX_DEG: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// Signed distances along each ray; positive means in front.
    pub depth_1: f64,
    pub depth_2: f64,
    pub parallax_deg: f64,
    /// Largest angle (rad) between an input ray and the direction to `point`.
    pub residual: f64,
}

impl Triangulation {
    pub fn in_front(&self) -> bool {
        self.depth_1 > 0.0 && self.depth_2 > 0.0
    }
}

fn angle(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Angle (deg) under which `point` is seen from two camera centers.
pub fn parallax_angle(point: &Vector3<f64>, c1: &Vector3<f64>, c2: &Vector3<f64>) -> f64 {
    angle(&(point - c1), &(point - c2)).to_degrees()
}

pub fn triangulate(
    pose_1: &SE3Pose,
    pose_2: &SE3Pose,
    ray_1: &Vector3<f64>,
    ray_2: &Vector3<f64>,
) -> Result<Triangulation, GeometryError> {
    triangulate_with(pose_1, pose_2, ray_1, ray_2, MIN_PARALLAX_DEG)
}

/// Midpoint of the closest points of two viewing rays. Poses are
/// camera-from-world, rays are in their camera frames.
pub fn triangulate_with(
    pose_1: &SE3Pose,
    pose_2: &SE3Pose,
    ray_1: &Vector3<f64>,
    ray_2: &Vector3<f64>,
    min_parallax_deg: f64,
) -> Result<Triangulation, GeometryError> {
    let d1 = (pose_1.rotation.inverse() * ray_1).normalize();
    let d2 = (pose_2.rotation.inverse() * ray_2).normalize();
    if !(d1.iter().chain(d2.iter()).all(|v| v.is_finite())) {
        return Err(GeometryError::InvalidInput("non-finite ray".into()));
    }
    let (c1, c2) = (pose_1.center(), pose_2.center());
    let w = c2 - c1;
    if w.norm() < 1e-12 {
        return Err(GeometryError::Degenerate("zero baseline".into()));
    }
    let ray_angle = angle(&d1, &d2).to_degrees();
    if ray_angle < min_parallax_deg {
        return Err(GeometryError::LowParallax(ray_angle));
    }
    let a = d1.dot(&d2);
    let (b1, b2) = (w.dot(&d1), w.dot(&d2));
    let den = 1.0 - a * a;
    if den < 1e-15 {
        return Err(GeometryError::LowParallax(ray_angle));
    }
    let l1 = (b1 - a * b2) / den;
    let l2 = (a * b1 - b2) / den;
    let p1 = c1 + l1 * d1;
    let p2 = c2 + l2 * d2;
    let point = (p1 + p2) * 0.5;
    let residual = angle(&(point - c1), &d1)
        .min(angle(&(c1 - point), &d1))
        .max(angle(&(point - c2), &d2).min(angle(&(c2 - point), &d2)));
    Ok(Triangulation {
        point,
        depth_1: l1,
        depth_2: l2,
        parallax_deg: parallax_angle(&point, &c1, &c2),
        residual,
    })
}

/// Mean over `points` of the angle (deg) between their viewing rays.
pub fn mean_parallax(points: &[Vector3<f64>], pose_1: &SE3Pose, pose_2: &SE3Pose) -> Result<f64, GeometryError> {
    if points.is_empty() {
        return Err(GeometryError::InvalidInput("no points".into()));
    }
    let (c1, c2) = (pose_1.center(), pose_2.center());
    Ok(points.iter().map(|p| parallax_angle(p, &c1, &c2)).sum::<f64>() / points.len() as f64)
}
