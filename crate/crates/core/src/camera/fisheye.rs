use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::CameraError;

/// Half-angle beyond which a direction is considered outside the field of view.
pub const MAX_FIELD_ANGLE: f64 = 95.0 * std::f64::consts::PI / 180.0;

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITERS: usize = 20;

/// Symmetric Kannala-Brandt model with four radial coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisheyeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub k: [f64; 4],
    pub width: u32,
    pub height: u32,
}

impl FisheyeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        k: [f64; 4],
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            k,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Zero-distortion (equidistant) camera.
    pub fn equidistant(f: f64, width: u32, height: u32) -> Self {
        Self {
            fx: f,
            fy: f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            k: [0.0; 4],
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .chain(self.k.iter())
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CameraError::InvalidIntrinsics(
                "focal lengths must be positive and finite".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(CameraError::InvalidIntrinsics("empty image".into()));
        }
        if !self.contains(&Vector2::new(self.cx, self.cy)) {
            return Err(CameraError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn is_distortion_free(&self) -> bool {
        self.k.iter().all(|&k| k == 0.0)
    }

    /// Mean focal length, used to express angular errors in pixels.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    pub fn contains_with_margin(&self, px: &Vector2<f64>, margin: f64) -> bool {
        px.x >= margin
            && px.y >= margin
            && px.x < self.width as f64 - margin
            && px.y < self.height as f64 - margin
    }

    fn distort(&self, theta: f64) -> (f64, f64) {
        let [k1, k2, k3, k4] = self.k;
        let t2 = theta * theta;
        let poly = 1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4)));
        let dpoly = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)));
        (theta * poly, dpoly)
    }

    /// Projects a camera-frame point to pixels.
    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        let r = (p.x * p.x + p.y * p.y).sqrt();
        if r == 0.0 && p.z == 0.0 {
            return Err(CameraError::UndefinedProjection);
        }
        let theta = r.atan2(p.z);
        if theta >= MAX_FIELD_ANGLE {
            return Err(CameraError::OutOfFieldOfView);
        }
        if r == 0.0 {
            return Ok(Vector2::new(self.cx, self.cy));
        }
        let (theta_d, _) = self.distort(theta);
        Ok(Vector2::new(
            self.fx * theta_d * p.x / r + self.cx,
            self.fy * theta_d * p.y / r + self.cy,
        ))
    }

    /// Projection together with its 2x3 Jacobian with respect to the
    /// camera-frame point.
    pub fn project_with_jacobian(
        &self,
        p: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>), CameraError> {
        let (x, y, z) = (p.x, p.y, p.z);
        let r2 = x * x + y * y;
        let r = r2.sqrt();
        if r == 0.0 && z == 0.0 {
            return Err(CameraError::UndefinedProjection);
        }
        let theta = r.atan2(z);
        if theta >= MAX_FIELD_ANGLE {
            return Err(CameraError::OutOfFieldOfView);
        }
        if r < 1e-9 * z.abs() {
            // On-axis limit: the model reduces to a pinhole to first order.
            let px = Vector2::new(self.fx * x / z + self.cx, self.fy * y / z + self.cy);
            let j = Matrix2x3::new(
                self.fx / z,
                0.0,
                -self.fx * x / (z * z),
                0.0,
                self.fy / z,
                -self.fy * y / (z * z),
            );
            return Ok((px, j));
        }
        let rho2 = r2 + z * z;
        let (theta_d, dtd) = self.distort(theta);
        let g = theta_d / r;
        let dtheta_dx = z * x / (r * rho2);
        let dtheta_dy = z * y / (r * rho2);
        let dtheta_dz = -r / rho2;
        let r3 = r2 * r;
        let dg_dx = dtd * dtheta_dx / r - theta_d * x / r3;
        let dg_dy = dtd * dtheta_dy / r - theta_d * y / r3;
        let dg_dz = dtd * dtheta_dz / r;
        let px = Vector2::new(self.fx * g * x + self.cx, self.fy * g * y + self.cy);
        let j = Matrix2x3::new(
            self.fx * (g + x * dg_dx),
            self.fx * x * dg_dy,
            self.fx * x * dg_dz,
            self.fy * y * dg_dx,
            self.fy * (g + y * dg_dy),
            self.fy * y * dg_dz,
        );
        Ok((px, j))
    }

    /// Inverts the distortion polynomial by Newton iteration and returns the
    /// unit viewing ray.
    pub fn unproject(&self, px: &Vector2<f64>) -> Result<Vector3<f64>, CameraError> {
        let mx = (px.x - self.cx) / self.fx;
        let my = (px.y - self.cy) / self.fy;
        let theta_d = (mx * mx + my * my).sqrt();
        if !theta_d.is_finite() {
            return Err(CameraError::NumericFailure);
        }
        if theta_d == 0.0 {
            return Ok(Vector3::new(0.0, 0.0, 1.0));
        }
        let theta = if self.is_distortion_free() {
            theta_d
        } else {
            self.invert_distortion(theta_d)?
        };
        let s = theta.sin() / theta_d;
        Ok(Vector3::new(mx * s, my * s, theta.cos()))
    }

    fn invert_distortion(&self, theta_d: f64) -> Result<f64, CameraError> {
        let mut theta = theta_d;
        for _ in 0..NEWTON_MAX_ITERS {
            let (f, df) = self.distort(theta);
            if df <= 0.0 || !df.is_finite() {
                return Err(CameraError::NumericFailure);
            }
            let step = (f - theta_d) / df;
            theta -= step;
            if step.abs() < NEWTON_TOL {
                return Ok(theta);
            }
        }
        Err(CameraError::NumericFailure)
    }
}
