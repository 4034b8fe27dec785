use std::f64::consts::TAU;

use nalgebra::{Matrix3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use super::{SceneSpec, SimError};
use crate::camera::SE3Pose;

/// One piece of the scripted motion. Speeds in mm per frame along the
/// centerline; the camera always looks toward increasing `s`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    /// Backs out of the tube (against the viewing direction).
    Withdraw { frames: usize, speed: f64 },
    /// Moves deeper into the tube, re-observing what lies ahead.
    Advance { frames: usize, speed: f64 },
    Hold { frames: usize },
}

impl Segment {
    pub fn frames(&self) -> usize {
        match *self {
            Segment::Withdraw { frames, .. } | Segment::Advance { frames, .. } | Segment::Hold { frames } => frames,
        }
    }

    fn velocity(&self) -> f64 {
        match *self {
            Segment::Withdraw { speed, .. } => -speed,
            Segment::Advance { speed, .. } => speed,
            Segment::Hold { .. } => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub start_s: f64,
    pub fps: f64,
    pub segments: Vec<Segment>,
    /// Radius (mm) and period (frames) of the lateral scanning circle.
    pub scan_radius: f64,
    pub scan_period: f64,
    pub scan_phase: f64,
    /// Amplitude (degrees) and period (frames) of the viewing-direction wobble.
    pub wobble_deg: f64,
    pub wobble_period: f64,
    /// Time constant (frames) of the first-order speed filter; 1 = instant.
    pub smoothing: f64,
    /// Minimum clearance (mm) to the wall.
    pub wall_margin: f64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            start_s: 1100.0,
            fps: 30.0,
            segments: vec![Segment::Withdraw { frames: 300, speed: 0.45 }],
            scan_radius: 2.0,
            scan_period: 150.0,
            scan_phase: 0.0,
            wobble_deg: 4.0,
            wobble_period: 170.0,
            smoothing: 12.0,
            wall_margin: 2.0,
        }
    }
}

impl TrajectorySpec {
    pub fn n_frames(&self) -> usize {
        self.segments.iter().map(Segment::frames).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GtTrajectory {
    pub timestamps: Vec<f64>,
    /// Camera-from-world.
    pub poses: Vec<SE3Pose>,
    /// Centerline parameter of each frame.
    pub s: Vec<f64>,
}

impl GtTrajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Total distance travelled by the camera center.
    pub fn path_length(&self) -> f64 {
        self.poses.windows(2).map(|w| (w[1].center() - w[0].center()).norm()).sum()
    }
}

/// Camera-from-world pose at centerline parameter `s` for frame `k`.
pub fn camera_pose(scene: &SceneSpec, spec: &TrajectorySpec, s: f64, k: usize) -> (SE3Pose, f64) {
    let (n1, n2) = scene.section_axes(s);
    let t = scene.tangent(s);
    let a = TAU * k as f64 / spec.scan_period.max(1.0) + spec.scan_phase;
    let offset = spec.scan_radius * (a.cos() * n1 + a.sin() * n2);
    let center = scene.center(s) + offset;
    let w = spec.wobble_deg.to_radians();
    let yaw = w * (TAU * k as f64 / spec.wobble_period.max(1.0)).sin();
    let pitch = w * (TAU * k as f64 / (1.37 * spec.wobble_period.max(1.0)) + 0.4).sin();
    let z = (UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(n2), yaw)
        * UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(n1), pitch)
        * t)
        .normalize();
    let x = (n1 - z * z.dot(&n1)).normalize();
    let y = z.cross(&x);
    let r_cw = UnitQuaternion::from_matrix(&Matrix3::from_columns(&[x, y, z])).inverse();
    let clearance = scene.radius_at(s) - offset.norm();
    (SE3Pose::new(r_cw, -(r_cw * center)), clearance)
}

pub fn generate_trajectory(scene: &SceneSpec, spec: &TrajectorySpec) -> Result<GtTrajectory, SimError> {
    if !(spec.fps > 0.0) {
        return Err(SimError::InvalidInput("fps must be positive".into()));
    }
    let n = spec.n_frames();
    let mut out = GtTrajectory { timestamps: Vec::with_capacity(n), poses: Vec::with_capacity(n), s: Vec::with_capacity(n) };
    let alpha = 1.0 / spec.smoothing.max(1.0);
    let mut s = spec.start_s;
    let mut v = spec.segments.first().map(Segment::velocity).unwrap_or(0.0);
    let mut k = 0usize;
    for seg in &spec.segments {
        for _ in 0..seg.frames() {
            if k > 0 {
                v += (seg.velocity() - v) * alpha;
                s += v;
            }
            if !(0.0..=scene.length).contains(&s) {
                return Err(SimError::InvalidInput(format!("frame {k} leaves the tube (s = {s:.3})")));
            }
            let (pose, clearance) = camera_pose(scene, spec, s, k);
            if clearance < spec.wall_margin {
                return Err(SimError::InvalidInput(format!("frame {k} is {clearance:.3} mm from the wall")));
            }
            out.timestamps.push(k as f64 / spec.fps);
            out.poses.push(pose);
            out.s.push(s);
            k += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn poses_are_rigid_and_look_down_the_tube() {
        let scene = SceneSpec::default();
        let spec = TrajectorySpec::default();
        let gt = generate_trajectory(&scene, &spec).unwrap();
        assert_eq!(gt.len(), 300);
        for (p, s) in gt.poses.iter().zip(&gt.s) {
            assert!(p.orthonormality_error() < 1e-9);
            let forward = p.rotation.inverse() * Vector3::z();
            assert!(forward.dot(&scene.tangent(*s)) > 0.99);
        }
        // withdrawal: s decreases at roughly the commanded speed
        let travelled = gt.s[0] - gt.s[299];
        assert!((travelled - 0.45 * 299.0).abs() < 1.0, "{travelled}");
    }

    #[test]
    fn leaving_the_tube_is_reported_with_the_frame() {
        let scene = SceneSpec::default();
        let spec = TrajectorySpec { scan_radius: 14.0, ..Default::default() };
        let err = generate_trajectory(&scene, &spec).unwrap_err();
        assert!(err.to_string().contains("frame 0"), "{err}");
        let spec = TrajectorySpec { start_s: 30.0, ..Default::default() };
        let err = generate_trajectory(&scene, &spec).unwrap_err();
        assert!(err.to_string().contains("leaves the tube"), "{err}");
    }

    #[test]
    fn same_spec_same_trajectory() {
        let scene = SceneSpec::default();
        let spec = TrajectorySpec::default();
        assert_eq!(generate_trajectory(&scene, &spec).unwrap(), generate_trajectory(&scene, &spec).unwrap());
    }
}
