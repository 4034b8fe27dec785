//! Calibrated fisheye camera, rigid poses and similarity transforms.

mod fisheye;
mod transform;

pub use fisheye::{FisheyeCamera, MAX_FIELD_ANGLE};
pub use transform::{PoseRecord, SE3Pose, Sim3Transform};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("projection undefined at the optical center")]
    UndefinedProjection,
    #[error("direction outside the field of view")]
    OutOfFieldOfView,
    #[error("distortion inversion did not converge")]
    NumericFailure,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Composition `a ∘ b` (applies `b` first).
pub fn compose_sim3(a: &Sim3Transform, b: &Sim3Transform) -> Sim3Transform {
    a.compose(b)
}

pub fn apply_sim3(t: &Sim3Transform, p: &nalgebra::Vector3<f64>) -> nalgebra::Vector3<f64> {
    t.apply(p)
}
