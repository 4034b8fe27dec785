use nalgebra::{Matrix6, Vector2, Vector3, Vector6};

use super::{chi2_accepts, huber, huber_weight, reprojection_jacobian, NoiseModel, OptimError, CHI2_2DOF_95};
use crate::camera::{FisheyeCamera, SE3Pose};

/// A frame keypoint paired with the world position of its map point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseObservation {
    pub point: Vector3<f64>,
    pub pixel: Vector2<f64>,
    pub octave: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseOnlySettings {
    pub rounds: usize,
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub min_inliers: usize,
}

impl Default for PoseOnlySettings {
    fn default() -> Self {
        Self { rounds: 4, max_iterations: 10, initial_lambda: 1e-4, min_inliers: 6 }
    }
}

#[derive(Clone, Debug)]
pub struct PoseOnlyResult {
    pub pose: SE3Pose,
    pub inliers: Vec<bool>,
    pub n_inliers: usize,
    /// Robust cost after every accepted step, one list per round (the first
    /// entry of each list is the cost at the start of the round).
    pub cost_history: Vec<Vec<f64>>,
}

fn normalized_error(pose: &SE3Pose, o: &PoseObservation, camera: &FisheyeCamera, noise: &NoiseModel) -> Option<f64> {
    let pc = pose.transform_point(&o.point);
    let px = camera.project(&pc).ok()?;
    Some((px - o.pixel).norm_squared() * noise.information(o.octave))
}

fn robust_cost(pose: &SE3Pose, obs: &[PoseObservation], active: &[bool], camera: &FisheyeCamera, noise: &NoiseModel) -> f64 {
    let mut c = 0.0;
    for (o, _) in obs.iter().zip(active).filter(|(_, &a)| a) {
        match normalized_error(pose, o, camera, noise) {
            Some(e2) => c += huber(e2, CHI2_2DOF_95),
            None => return f64::INFINITY,
        }
    }
    c
}

/// Levenberg-Marquardt over the frame pose with Huber-weighted
/// reprojection errors; outliers are re-gated between rounds.
pub fn pose_only_optimize(
    initial: &SE3Pose,
    observations: &[PoseObservation],
    noise: &NoiseModel,
    camera: &FisheyeCamera,
    settings: &PoseOnlySettings,
) -> Result<PoseOnlyResult, OptimError> {
    if observations.len() < settings.min_inliers {
        return Err(OptimError::TrackingFailure { inliers: observations.len() });
    }
    let n = observations.len();
    let mut pose = *initial;
    let mut active: Vec<bool> = observations
        .iter()
        .map(|o| normalized_error(&pose, o, camera, noise).is_some())
        .collect();
    let mut history = Vec::with_capacity(settings.rounds);
    for _ in 0..settings.rounds {
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active < settings.min_inliers {
            return Err(OptimError::TrackingFailure { inliers: n_active });
        }
        let mut lambda = settings.initial_lambda;
        let mut cost = robust_cost(&pose, observations, &active, camera, noise);
        let mut round = vec![cost];
        for _ in 0..settings.max_iterations {
            let mut h = Matrix6::<f64>::zeros();
            let mut g = Vector6::<f64>::zeros();
            for (o, _) in observations.iter().zip(&active).filter(|(_, &a)| a) {
                let Ok(j) = reprojection_jacobian(&pose, &o.point, &o.pixel, camera) else { continue };
                let info = noise.information(o.octave);
                let e2 = j.residual.norm_squared() * info;
                let w = info * huber_weight(e2, CHI2_2DOF_95);
                h += j.d_pose.transpose() * j.d_pose * w;
                g += j.d_pose.transpose() * j.residual * w;
            }
            if g.norm() < 1e-14 {
                break;
            }
            let mut accepted = false;
            while lambda < 1e12 {
                let mut hd = h;
                for k in 0..6 {
                    hd[(k, k)] += lambda * h[(k, k)].max(1e-12);
                }
                let Some(chol) = hd.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = -chol.solve(&g);
                let cand = pose.retract(&[delta[0], delta[1], delta[2], delta[3], delta[4], delta[5]]);
                let c = robust_cost(&cand, observations, &active, camera, noise);
                if c < cost {
                    pose = cand;
                    cost = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    round.push(cost);
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted || cost == 0.0 {
                break;
            }
        }
        history.push(round);
        for (i, o) in observations.iter().enumerate() {
            active[i] = normalized_error(&pose, o, camera, noise).is_some_and(chi2_accepts);
        }
    }
    let n_inliers = active.iter().filter(|&&a| a).count();
    if n_inliers < settings.min_inliers {
        return Err(OptimError::TrackingFailure { inliers: n_inliers });
    }
    debug_assert_eq!(active.len(), n);
    Ok(PoseOnlyResult { pose, inliers: active, n_inliers, cost_history: history })
}
