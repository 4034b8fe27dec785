use nalgebra::{Matrix2, Vector2, Vector3};
use thiserror::Error;

use super::{TrackingError, TrackingParams};
use crate::camera::{FisheyeCamera, SE3Pose};
use crate::geometry::{
    essential_from_fundamental, mean_parallax, motion_from_essential, ransac_fundamental, Correspondence2D2D, RansacParams,
};
use crate::map::{Frame, KeypointGrid};
use crate::optim::NoiseModel;

/// χ² quantile (2 DoF, 95%) that scales the covariance ellipse.
pub const CHI2_95_ELLIPSE: f64 = 5.991;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InitRejection {
    #[error("{found} matches, {required} required")]
    TooFewMatches { found: usize, required: usize },
    #[error("two-view geometry failed: {0}")]
    Geometry(String),
    #[error("mean reprojection error {mean:.3} px above {bound:.3} px")]
    Reprojection { mean: f64, bound: f64 },
    #[error("mean parallax {0:.3} deg too low")]
    Parallax(f64),
    #[error("point distribution overlap {0:.3} too low")]
    Distribution(f64),
}

/// Accepted two-view reconstruction; the reference camera is the world frame.
#[derive(Clone, Debug)]
pub struct TwoViewInit {
    /// Current camera from reference camera, unit baseline.
    pub pose_cur: SE3Pose,
    /// `(reference keypoint, current keypoint, point)`.
    pub points: Vec<(usize, usize, Vector3<f64>)>,
    pub mean_parallax_deg: f64,
    pub overlap: f64,
    pub mean_error_px: f64,
}

/// Fits the covariance ellipse of `points` scaled to the 95% mass of a
/// Gaussian and returns the fraction of the image it covers.
pub fn point_distribution_check(
    points: &[Vector2<f64>],
    width: u32,
    height: u32,
    threshold: f64,
) -> Result<(f64, bool), TrackingError> {
    if points.len() < 5 {
        return Err(TrackingError::InvalidInput(format!("{} points, 5 required", points.len())));
    }
    let n = points.len() as f64;
    let mean = points.iter().sum::<Vector2<f64>>() / n;
    let mut cov = Matrix2::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let Some(inv) = cov.try_inverse().filter(|_| cov.determinant() > 1e-12) else {
        return Ok((0.0, false));
    };
    // pixel-center sampling on a 2 px lattice
    const STEP: u32 = 2;
    let (mut inside, mut total) = (0usize, 0usize);
    for y in (0..height).step_by(STEP as usize) {
        for x in (0..width).step_by(STEP as usize) {
            let d = Vector2::new(x as f64 + STEP as f64 * 0.5, y as f64 + STEP as f64 * 0.5) - mean;
            if (d.transpose() * inv * d)[0] <= CHI2_95_ELLIPSE {
                inside += 1;
            }
            total += 1;
        }
    }
    let frac = inside as f64 / total as f64;
    Ok((frac, frac >= threshold))
}

/// Mutual ratio-test matches between two frames restricted to pairs whose
/// pixel distance is below `radius`.
pub(crate) fn windowed_matches(a: &Frame, b: &Frame, size: (u32, u32), radius: f64, nndr: f64) -> Vec<(usize, usize)> {
    let best_in = |from: &Frame, i: usize, cands: &[usize], to: &Frame| -> Option<usize> {
        let d = &from.keypoints[i].descriptor;
        let mut best: Option<(usize, f64)> = None;
        let mut second = 0.0f64;
        for &j in cands {
            let s = d.dot(&to.keypoints[j].descriptor);
            match best {
                Some((_, bs)) if s <= bs => second = second.max(s),
                Some((_, bs)) => {
                    second = bs;
                    best = Some((j, s));
                }
                None => best = Some((j, s)),
            }
        }
        let (j, s) = best?;
        (s > 0.0 && second / s < nndr).then_some(j)
    };
    let a_grid = KeypointGrid::build(&a.keypoints, size.0, size.1);
    let b_grid = KeypointGrid::build(&b.keypoints, size.0, size.1);
    let mut out = Vec::new();
    for i in 0..a.keypoints.len() {
        let cands = b_grid.query(&b.keypoints, &a.keypoints[i].pixel, radius);
        let Some(j) = best_in(a, i, &cands, b) else { continue };
        let back = a_grid.query(&a.keypoints, &b.keypoints[j].pixel, radius);
        if best_in(b, j, &back, a) == Some(i) {
            out.push((i, j));
        }
    }
    out
}

/// Two-view initialization with the four acceptance checks.
pub fn initialize_two_view(
    frame_ref: &Frame,
    frame_cur: &Frame,
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    params: &TrackingParams,
    seed: u64,
) -> Result<TwoViewInit, InitRejection> {
    let pairs = windowed_matches(frame_ref, frame_cur, (camera.width, camera.height), params.disp_win, params.nndr);
    if pairs.len() < params.theta_init {
        return Err(InitRejection::TooFewMatches { found: pairs.len(), required: params.theta_init });
    }
    let mut corrs = Vec::with_capacity(pairs.len());
    let mut used = Vec::with_capacity(pairs.len());
    for &(i, j) in &pairs {
        let (Ok(r1), Ok(r2)) = (camera.unproject(&frame_ref.keypoints[i].pixel), camera.unproject(&frame_cur.keypoints[j].pixel)) else {
            continue;
        };
        let c = Correspondence2D2D { ray_1: r1, ray_2: r2, index_1: i, index_2: j };
        if let Some(n) = c.normalized() {
            corrs.push(c);
            used.push(n);
        }
    }
    if used.len() < params.theta_init {
        return Err(InitRejection::TooFewMatches { found: used.len(), required: params.theta_init });
    }
    let thr = (params.init_epipolar_px / camera.focal()).powi(2) * 3.84;
    let ransac = RansacParams { max_iterations: 300, inlier_threshold: thr, min_inliers_accept: 8, confidence: 0.999, rng_seed: seed };
    let (f, mask) = ransac_fundamental(&used, &ransac).map_err(|e| InitRejection::Geometry(e.to_string()))?;
    let inliers: Vec<Correspondence2D2D> = corrs.iter().zip(&mask).filter(|(_, m)| **m).map(|(c, _)| *c).collect();
    let motion =
        motion_from_essential(&essential_from_fundamental(&f), &inliers).map_err(|e| InitRejection::Geometry(e.to_string()))?;
    let id = SE3Pose::identity();
    let gross = 4.0 * params.init_epipolar_px;
    let mut points = Vec::new();
    let (mut err_sum, mut sigma_sum) = (0.0, 0.0);
    for (c, p) in inliers.iter().zip(&motion.points) {
        let Some(p) = p else { continue };
        let kr = &frame_ref.keypoints[c.index_1];
        let kc = &frame_cur.keypoints[c.index_2];
        let (Ok(u1), Ok(u2)) = (camera.project(p), camera.project(&motion.pose.transform_point(p))) else {
            continue;
        };
        let (e1, e2) = ((u1 - kr.pixel).norm(), (u2 - kc.pixel).norm());
        if e1 > gross || e2 > gross {
            continue;
        }
        err_sum += 0.5 * (e1 + e2);
        sigma_sum += 0.5 * (noise.sigma(kr.octave) + noise.sigma(kc.octave));
        points.push((c.index_1, c.index_2, *p));
    }
    if points.len() < params.theta_init {
        return Err(InitRejection::TooFewMatches { found: points.len(), required: params.theta_init });
    }
    let n = points.len() as f64;
    let (mean_err, bound) = (err_sum / n, params.eps_init * sigma_sum / n);
    if mean_err > bound {
        return Err(InitRejection::Reprojection { mean: mean_err, bound });
    }
    let pts: Vec<Vector3<f64>> = points.iter().map(|p| p.2).collect();
    let parallax = mean_parallax(&pts, &id, &motion.pose).map_err(|e| InitRejection::Geometry(e.to_string()))?;
    if parallax < params.parallax_min_deg {
        return Err(InitRejection::Parallax(parallax));
    }
    let px: Vec<Vector2<f64>> = points.iter().map(|p| frame_cur.keypoints[p.1].pixel).collect();
    let (overlap, pass) = point_distribution_check(&px, camera.width, camera.height, params.theta_ellipse)
        .map_err(|e| InitRejection::Geometry(e.to_string()))?;
    if !pass {
        return Err(InitRejection::Distribution(overlap));
    }
    Ok(TwoViewInit { pose_cur: motion.pose, points, mean_parallax_deg: parallax, overlap, mean_error_px: mean_err })
}
