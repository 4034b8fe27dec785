use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3};

use crate::camera::{CameraError, FisheyeCamera, SE3Pose};
use crate::map::{KeyFrameId, MapPointId};

/// One keypoint observation of a map point in a keyframe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprojectionFactor {
    pub keyframe: KeyFrameId,
    pub keypoint: usize,
    pub point: MapPointId,
    pub pixel: Vector2<f64>,
    pub octave: u8,
}

/// Residual and Jacobians of `π(T·X) − u`. The pose Jacobian is with
/// respect to the left perturbation used by [`SE3Pose::retract`]
/// (translation first).
#[derive(Clone, Copy, Debug)]
pub struct ReprojectionJacobian {
    pub residual: Vector2<f64>,
    pub d_pose: Matrix2x6<f64>,
    pub d_point: Matrix2x3<f64>,
    pub depth: f64,
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn reprojection_residual(
    pose: &SE3Pose,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
    camera: &FisheyeCamera,
) -> Result<Vector2<f64>, CameraError> {
    Ok(camera.project(&pose.transform_point(point))? - pixel)
}

pub fn reprojection_jacobian(
    pose: &SE3Pose,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
    camera: &FisheyeCamera,
) -> Result<ReprojectionJacobian, CameraError> {
    let pc = pose.transform_point(point);
    let (px, jp) = camera.project_with_jacobian(&pc)?;
    let mut d_pose = Matrix2x6::zeros();
    d_pose.fixed_view_mut::<2, 3>(0, 0).copy_from(&jp);
    d_pose.fixed_view_mut::<2, 3>(0, 3).copy_from(&(-jp * skew(&pc)));
    Ok(ReprojectionJacobian {
        residual: px - pixel,
        d_pose,
        d_point: jp * pose.rotation_matrix(),
        depth: pc.z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn check_random_factors(n: usize, seed: u64, camera: &FisheyeCamera) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut done = 0;
        while done < n {
            let pose = SE3Pose::new(
                UnitQuaternion::from_euler_angles(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0)),
                Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            );
            let pc = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..5.0));
            let x = pose.inverse().transform_point(&pc);
            let u = Vector2::new(320.0, 240.0);
            let Ok(j) = reprojection_jacobian(&pose, &x, &u, camera) else { continue };
            let h = 1e-6;
            for k in 0..6 {
                let mut d = [0.0; 6];
                d[k] = h;
                let rp = reprojection_residual(&pose.retract(&d), &x, &u, camera).unwrap();
                d[k] = -h;
                let rm = reprojection_residual(&pose.retract(&d), &x, &u, camera).unwrap();
                let fd = (rp - rm) / (2.0 * h);
                let col = j.d_pose.column(k);
                worst = worst.max((fd - col).norm() / col.norm().max(1.0));
            }
            for k in 0..3 {
                let mut dx = Vector3::zeros();
                dx[k] = h;
                let rp = reprojection_residual(&pose, &(x + dx), &u, camera).unwrap();
                let rm = reprojection_residual(&pose, &(x - dx), &u, camera).unwrap();
                let fd = (rp - rm) / (2.0 * h);
                let col = j.d_point.column(k);
                worst = worst.max((fd - col).norm() / col.norm().max(1.0));
            }
            done += 1;
        }
        worst
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let pinhole_like = FisheyeCamera::equidistant(300.0, 640, 480);
        assert!(check_random_factors(300, 1, &pinhole_like) < 1e-4);
        let distorted = FisheyeCamera::new(290.0, 295.0, 318.0, 242.0, [0.05, -0.01, 0.002, -0.0005], 640, 480).unwrap();
        assert!(check_random_factors(300, 2, &distorted) < 1e-4);
    }
}
