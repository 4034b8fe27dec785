//! Minimal solvers and robust estimation.

mod horn;
mod pnp;
mod ransac;
mod triangulation;
mod two_view;

pub use horn::{horn_sim3, ransac_sim3, ransac_sim3_normalized, sim3_transfer_error};
pub use pnp::{dlt_resection, pnp_ransac, reprojection_inlier};
pub use ransac::{derive_seed, ransac, RansacOutcome, RansacParams};
pub use triangulation::{
    mean_parallax, parallax_angle, triangulate, triangulate_with, Triangulation, MIN_PARALLAX_DEG,
};
pub use two_view::{
    eight_point_fundamental, essential_from_fundamental, motion_from_essential, select_motion,
    ransac_fundamental, TwoViewMotion,
};

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("no consensus: best model had {best_inliers} inliers, {required} required")]
    NotFound { best_inliers: usize, required: usize },
    #[error("ambiguous motion: best decomposition supports {best} of {total}")]
    AmbiguousMotion { best: usize, total: usize },
    #[error("parallax {0:.4} deg below the minimum")]
    LowParallax(f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence3D3D {
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub index_a: usize,
    pub index_b: usize,
}

/// Observation of a known 3D point in a frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence2D3D {
    pub pixel: Vector2<f64>,
    /// Unit bearing of `pixel` in the camera frame.
    pub bearing: Vector3<f64>,
    pub octave: u8,
    pub point: Vector3<f64>,
    pub index_2d: usize,
    pub index_3d: usize,
}

/// Bearings of one feature seen in two views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence2D2D {
    pub ray_1: Vector3<f64>,
    pub ray_2: Vector3<f64>,
    pub index_1: usize,
    pub index_2: usize,
}

impl Correspondence2D2D {
    pub fn new(ray_1: Vector3<f64>, ray_2: Vector3<f64>) -> Self {
        Self { ray_1, ray_2, index_1: 0, index_2: 0 }
    }

    /// Normalized image coordinates `(x/z, y/z)` of both rays, if both lie
    /// in front of their camera.
    pub fn normalized(&self) -> Option<(Vector2<f64>, Vector2<f64>)> {
        let f = |r: &Vector3<f64>| (r.z > 1e-3).then(|| Vector2::new(r.x / r.z, r.y / r.z));
        Some((f(&self.ray_1)?, f(&self.ray_2)?))
    }
}

fn check_finite3(p: &Vector3<f64>) -> Result<(), GeometryError> {
    if p.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GeometryError::InvalidInput("non-finite coordinate".into()))
    }
}
