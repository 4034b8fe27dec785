use nalgebra::{SMatrix, SVector, Vector2, Vector3};

use super::{chi2_accepts, huber, huber_weight, NoiseModel, OptimError, CHI2_2DOF_95};
use crate::camera::{FisheyeCamera, SE3Pose, Sim3Transform};

/// A matched pair of map points from two maps, each with the keyframe
/// observation it was matched through.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3Match {
    /// Point of the first map, in its own frame.
    pub point_a: Vector3<f64>,
    /// Point of the second map, in its own frame.
    pub point_m: Vector3<f64>,
    pub pose_a: SE3Pose,
    pub pixel_a: Vector2<f64>,
    pub octave_a: u8,
    pub pose_m: SE3Pose,
    pub pixel_m: Vector2<f64>,
    pub octave_m: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sim3RefineSettings {
    pub rounds: usize,
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub min_inliers: usize,
}

impl Default for Sim3RefineSettings {
    fn default() -> Self {
        Self { rounds: 2, max_iterations: 10, initial_lambda: 1e-4, min_inliers: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sim3RefineResult {
    pub transform: Sim3Transform,
    pub inliers: Vec<bool>,
    pub n_inliers: usize,
    pub cost_history: Vec<Vec<f64>>,
}

type Residual4 = SVector<f64, 4>;

/// Both reprojection residuals of a match, whitened by the noise model.
fn residual(t: &Sim3Transform, t_inv: &Sim3Transform, m: &Sim3Match, camera: &FisheyeCamera, noise: &NoiseModel) -> Option<Residual4> {
    let in_a = m.pose_a.transform_point(&t_inv.apply(&m.point_m));
    let in_m = m.pose_m.transform_point(&t.apply(&m.point_a));
    if in_a.z <= 0.0 || in_m.z <= 0.0 {
        return None;
    }
    let ea = (camera.project(&in_a).ok()? - m.pixel_a) * noise.information(m.octave_a).sqrt();
    let em = (camera.project(&in_m).ok()? - m.pixel_m) * noise.information(m.octave_m).sqrt();
    Some(Residual4::new(ea.x, ea.y, em.x, em.y))
}

fn robust(r: &Residual4) -> f64 {
    huber(r.fixed_rows::<2>(0).norm_squared(), CHI2_2DOF_95) + huber(r.fixed_rows::<2>(2).norm_squared(), CHI2_2DOF_95)
}

fn total_cost(t: &Sim3Transform, matches: &[Sim3Match], active: &[bool], camera: &FisheyeCamera, noise: &NoiseModel) -> f64 {
    let t_inv = t.inverse();
    let mut c = 0.0;
    for (m, _) in matches.iter().zip(active).filter(|(_, &a)| a) {
        match residual(t, &t_inv, m, camera, noise) {
            Some(r) => c += robust(&r),
            None => return f64::INFINITY,
        }
    }
    c
}

fn gate(t: &Sim3Transform, matches: &[Sim3Match], camera: &FisheyeCamera, noise: &NoiseModel) -> Vec<bool> {
    let t_inv = t.inverse();
    matches
        .iter()
        .map(|m| {
            residual(t, &t_inv, m, camera, noise).is_some_and(|r| {
                chi2_accepts(r.fixed_rows::<2>(0).norm_squared()) && chi2_accepts(r.fixed_rows::<2>(2).norm_squared())
            })
        })
        .collect()
}

/// Refines the similarity mapping the first map into the second by
/// minimizing the bidirectional reprojection error of matched points.
pub fn sim3_refine(
    initial: &Sim3Transform,
    matches: &[Sim3Match],
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    settings: &Sim3RefineSettings,
) -> Result<Sim3RefineResult, OptimError> {
    let fail = |n: usize| OptimError::RefineFailure(format!("{n} inliers survive"));
    let mut t = *initial;
    // start from everything that projects; gross outliers are down-weighted
    let t_inv = t.inverse();
    let mut active: Vec<bool> = matches.iter().map(|m| residual(&t, &t_inv, m, camera, noise).is_some()).collect();
    let mut history = Vec::new();
    for _ in 0..settings.rounds {
        let n = active.iter().filter(|a| **a).count();
        if n < settings.min_inliers {
            return Err(fail(n));
        }
        let mut cost = total_cost(&t, matches, &active, camera, noise);
        let mut costs = vec![cost];
        let mut lambda = settings.initial_lambda;
        for _ in 0..settings.max_iterations {
            let t_inv = t.inverse();
            let mut h = SMatrix::<f64, 7, 7>::zeros();
            let mut g = SVector::<f64, 7>::zeros();
            for (m, _) in matches.iter().zip(&active).filter(|(_, &a)| a) {
                let Some(r0) = residual(&t, &t_inv, m, camera, noise) else { continue };
                let mut j = SMatrix::<f64, 4, 7>::zeros();
                let mut ok = true;
                for k in 0..7 {
                    let step = 1e-6;
                    let mut d = [0.0; 7];
                    d[k] = step;
                    let tp = t.retract(&d);
                    d[k] = -step;
                    let tm = t.retract(&d);
                    match (residual(&tp, &tp.inverse(), m, camera, noise), residual(&tm, &tm.inverse(), m, camera, noise)) {
                        (Some(a), Some(b)) => j.set_column(k, &((a - b) / (2.0 * step))),
                        _ => ok = false,
                    }
                }
                if !ok {
                    continue;
                }
                let wa = huber_weight(r0.fixed_rows::<2>(0).norm_squared(), CHI2_2DOF_95);
                let wm = huber_weight(r0.fixed_rows::<2>(2).norm_squared(), CHI2_2DOF_95);
                let w = SMatrix::<f64, 4, 4>::from_diagonal(&SVector::<f64, 4>::new(wa, wa, wm, wm));
                h += j.transpose() * w * j;
                g += j.transpose() * w * r0;
            }
            if g.norm() == 0.0 {
                break;
            }
            let mut accepted = false;
            while lambda < 1e10 {
                let mut a = h;
                for k in 0..7 {
                    a[(k, k)] += lambda * h[(k, k)].max(1e-12);
                }
                let Some(ch) = a.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let dx = ch.solve(&(-g));
                let cand = t.retract(dx.as_slice());
                let c = total_cost(&cand, matches, &active, camera, noise);
                if c < cost {
                    t = cand;
                    cost = c;
                    costs.push(c);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        history.push(costs);
        active = gate(&t, matches, camera, noise);
    }
    let n_inliers = active.iter().filter(|a| **a).count();
    if n_inliers < settings.min_inliers {
        return Err(fail(n_inliers));
    }
    Ok(Sim3RefineResult { transform: t, inliers: active, n_inliers, cost_history: history })
}
