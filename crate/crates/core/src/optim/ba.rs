use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Matrix6x3, Vector2, Vector3, Vector6};

use super::{chi2_accepts, huber, huber_weight, reprojection_jacobian, NoiseModel, CHI2_2DOF_95};
use crate::camera::{FisheyeCamera, SE3Pose};
use crate::map::{KeyFrameId, Map, MapError, MapPointId};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaObservation {
    pub pose: usize,
    pub point: usize,
    pub pixel: Vector2<f64>,
    pub octave: u8,
}

/// Reprojection problem over camera poses and points.
#[derive(Clone, Debug, Default)]
pub struct BaProblem {
    pub poses: Vec<SE3Pose>,
    pub fixed: Vec<bool>,
    pub points: Vec<Vector3<f64>>,
    pub observations: Vec<BaObservation>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaSettings {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub robust: bool,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub relative_tolerance: f64,
}

impl Default for BaSettings {
    fn default() -> Self {
        Self { max_iterations: 5, initial_lambda: 1e-4, robust: true, relative_tolerance: 1e-12 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BaReport {
    /// Cost at the start followed by the cost after each accepted step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub interrupted: bool,
}

impl BaReport {
    pub fn final_cost(&self) -> f64 {
        self.cost_history.last().copied().unwrap_or(0.0)
    }
}

impl BaProblem {
    /// Squared normalized error per observation; `None` when the point is
    /// behind the camera or cannot be projected.
    pub fn normalized_errors(&self, camera: &FisheyeCamera, noise: &NoiseModel) -> Vec<Option<f64>> {
        self.observations
            .iter()
            .map(|o| {
                let pc = self.poses[o.pose].transform_point(&self.points[o.point]);
                if pc.z <= 0.0 {
                    return None;
                }
                let px = camera.project(&pc).ok()?;
                Some((px - o.pixel).norm_squared() * noise.information(o.octave))
            })
            .collect()
    }

    /// Robust (or plain) cost over the active observations.
    pub fn cost(&self, camera: &FisheyeCamera, noise: &NoiseModel, active: &[bool], robust: bool) -> f64 {
        let mut c = 0.0;
        for (o, _) in self.observations.iter().zip(active).filter(|(_, &a)| a) {
            let pc = self.poses[o.pose].transform_point(&self.points[o.point]);
            if pc.z <= 0.0 {
                return f64::INFINITY;
            }
            let Ok(px) = camera.project(&pc) else { return f64::INFINITY };
            let e2 = (px - o.pixel).norm_squared() * noise.information(o.octave);
            c += if robust { huber(e2, CHI2_2DOF_95) } else { e2 };
        }
        c
    }

    /// RMS pixel reprojection error over the active observations.
    pub fn rms_pixels(&self, camera: &FisheyeCamera, active: &[bool]) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for (o, _) in self.observations.iter().zip(active).filter(|(_, &a)| a) {
            if let Ok(px) = camera.project(&self.poses[o.pose].transform_point(&self.points[o.point])) {
                s += (px - o.pixel).norm_squared();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            (s / n as f64).sqrt()
        }
    }

    /// Levenberg-Marquardt with the points eliminated by the Schur
    /// complement. Damping scales each diagonal block by `1 + λ`, which
    /// keeps the iterates covariant under a change of world frame.
    pub fn solve(
        &mut self,
        camera: &FisheyeCamera,
        noise: &NoiseModel,
        settings: &BaSettings,
        active: &[bool],
        abort: Option<&AtomicBool>,
    ) -> BaReport {
        let mut cam_var: Vec<Option<usize>> = vec![None; self.poses.len()];
        let mut nc = 0;
        for (i, f) in self.fixed.iter().enumerate() {
            if !f {
                cam_var[i] = Some(nc);
                nc += 1;
            }
        }
        let mut obs_of_point: Vec<Vec<usize>> = vec![Vec::new(); self.points.len()];
        for (i, o) in self.observations.iter().enumerate() {
            if active[i] {
                obs_of_point[o.point].push(i);
            }
        }
        let mut cost = self.cost(camera, noise, active, settings.robust);
        let mut report = BaReport { cost_history: vec![cost], ..Default::default() };
        if !cost.is_finite() {
            return report;
        }
        let mut lambda = settings.initial_lambda;
        let n_obs = self.observations.len();
        for _ in 0..settings.max_iterations {
            if abort.is_some_and(|a| a.load(Ordering::Relaxed)) {
                report.interrupted = true;
                break;
            }
            report.iterations += 1;
            // linearize
            let mut hcc = vec![Matrix6::<f64>::zeros(); nc];
            let mut gc = vec![Vector6::<f64>::zeros(); nc];
            let mut hpp = vec![Matrix3::<f64>::zeros(); self.points.len()];
            let mut gp = vec![Vector3::<f64>::zeros(); self.points.len()];
            let mut hcp: Vec<Option<Matrix6x3<f64>>> = vec![None; n_obs];
            for (i, o) in self.observations.iter().enumerate() {
                if !active[i] {
                    continue;
                }
                let Ok(j) = reprojection_jacobian(&self.poses[o.pose], &self.points[o.point], &o.pixel, camera) else {
                    continue;
                };
                let info = noise.information(o.octave);
                let e2 = j.residual.norm_squared() * info;
                let w = info * if settings.robust { huber_weight(e2, CHI2_2DOF_95) } else { 1.0 };
                let jpt = j.d_point.transpose() * w;
                hpp[o.point] += jpt * j.d_point;
                gp[o.point] += jpt * j.residual;
                if let Some(c) = cam_var[o.pose] {
                    let jct = j.d_pose.transpose() * w;
                    hcc[c] += jct * j.d_pose;
                    gc[c] += jct * j.residual;
                    hcp[i] = Some(jct * j.d_point);
                }
            }
            let mut accepted = false;
            while lambda < 1e10 {
                let damp6 = |h: &Matrix6<f64>| -> Matrix6<f64> {
                    let eps = 1e-9 * (h.trace() / 6.0).max(1e-12);
                    h * (1.0 + lambda) + Matrix6::identity() * (lambda * eps)
                };
                let mut hpp_inv = vec![None; self.points.len()];
                for (p, h) in hpp.iter().enumerate() {
                    if h.trace() <= 0.0 {
                        continue;
                    }
                    let eps = 1e-9 * (h.trace() / 3.0);
                    let d = h * (1.0 + lambda) + Matrix3::identity() * (lambda * eps);
                    hpp_inv[p] = d.try_inverse();
                }
                let mut s = DMatrix::<f64>::zeros(6 * nc, 6 * nc);
                let mut rhs = DVector::<f64>::zeros(6 * nc);
                for c in 0..nc {
                    s.fixed_view_mut::<6, 6>(6 * c, 6 * c).copy_from(&damp6(&hcc[c]));
                    rhs.fixed_rows_mut::<6>(6 * c).copy_from(&(-gc[c]));
                }
                for (p, obs) in obs_of_point.iter().enumerate() {
                    let Some(inv) = hpp_inv[p] else { continue };
                    let ginv = inv * gp[p];
                    for &i in obs {
                        let (Some(hi), Some(ci)) = (hcp[i], cam_var[self.observations[i].pose]) else { continue };
                        let hi_inv = hi * inv;
                        let mut r = rhs.fixed_rows_mut::<6>(6 * ci);
                        r += hi * ginv;
                        for &jx in obs {
                            let (Some(hj), Some(cj)) = (hcp[jx], cam_var[self.observations[jx].pose]) else { continue };
                            let mut blk = s.fixed_view_mut::<6, 6>(6 * ci, 6 * cj);
                            blk -= hi_inv * hj.transpose();
                        }
                    }
                }
                let dc = if nc == 0 {
                    Some(DVector::zeros(0))
                } else {
                    s.cholesky().map(|ch| ch.solve(&rhs))
                };
                let Some(dc) = dc else {
                    lambda *= 10.0;
                    continue;
                };
                let mut cand = self.clone();
                for (i, v) in cam_var.iter().enumerate() {
                    if let Some(c) = v {
                        let d = dc.fixed_rows::<6>(6 * c);
                        cand.poses[i] = self.poses[i].retract(&[d[0], d[1], d[2], d[3], d[4], d[5]]);
                    }
                }
                for (p, obs) in obs_of_point.iter().enumerate() {
                    let Some(inv) = hpp_inv[p] else { continue };
                    let mut r = -gp[p];
                    for &i in obs {
                        if let (Some(h), Some(c)) = (hcp[i], cam_var[self.observations[i].pose]) {
                            r -= h.transpose() * dc.fixed_rows::<6>(6 * c);
                        }
                    }
                    cand.points[p] = self.points[p] + inv * r;
                }
                let c = cand.cost(camera, noise, active, settings.robust);
                if c < cost {
                    let rel = (cost - c) / cost.max(1e-300);
                    *self = cand;
                    cost = c;
                    report.cost_history.push(cost);
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if rel < settings.relative_tolerance {
                        return report;
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted || cost == 0.0 {
                break;
            }
        }
        report
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalBaSettings {
    /// Covisible keyframes optimized together with the anchor.
    pub window: usize,
    pub first_round: BaSettings,
    pub second_round: BaSettings,
}

impl Default for LocalBaSettings {
    fn default() -> Self {
        Self {
            window: 20,
            first_round: BaSettings { max_iterations: 5, ..Default::default() },
            second_round: BaSettings { max_iterations: 5, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MapBaReport {
    pub rounds: Vec<BaReport>,
    pub interrupted: bool,
    pub skipped: bool,
    pub n_free_keyframes: usize,
    pub n_fixed_keyframes: usize,
    pub n_points: usize,
    pub removed_observations: usize,
    pub rms_before: f64,
    pub rms_after: f64,
}

struct Assembled {
    problem: BaProblem,
    kf_ids: Vec<KeyFrameId>,
    mp_ids: Vec<MapPointId>,
}

fn assemble(map: &Map, free: &BTreeSet<KeyFrameId>, fixed: &BTreeSet<KeyFrameId>, points: &BTreeSet<MapPointId>) -> Assembled {
    let kf_ids: Vec<KeyFrameId> = free.iter().chain(fixed.iter()).copied().collect();
    let kf_index: BTreeMap<KeyFrameId, usize> = kf_ids.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let mp_ids: Vec<MapPointId> = points.iter().copied().collect();
    let mut problem = BaProblem {
        poses: kf_ids.iter().map(|k| map.keyframes[k].pose).collect(),
        fixed: kf_ids.iter().map(|k| fixed.contains(k)).collect(),
        points: mp_ids.iter().map(|m| map.points[m].position).collect(),
        observations: Vec::new(),
    };
    for (pi, m) in mp_ids.iter().enumerate() {
        for (kf, &idx) in &map.points[m].observations {
            if let Some(&ci) = kf_index.get(kf) {
                let kp = &map.keyframes[kf].keypoints[idx];
                problem.observations.push(BaObservation { pose: ci, point: pi, pixel: kp.pixel, octave: kp.octave });
            }
        }
    }
    Assembled { problem, kf_ids, mp_ids }
}

fn run_rounds(
    map: &mut Map,
    asm: Assembled,
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    rounds: &[BaSettings],
    abort: Option<&AtomicBool>,
    remove_outliers: bool,
) -> MapBaReport {
    let Assembled { mut problem, kf_ids, mp_ids } = asm;
    let mut active: Vec<bool> = problem.normalized_errors(camera, noise).iter().map(|e| e.is_some()).collect();
    let mut report = MapBaReport {
        n_free_keyframes: problem.fixed.iter().filter(|f| !**f).count(),
        n_fixed_keyframes: problem.fixed.iter().filter(|f| **f).count(),
        n_points: mp_ids.len(),
        rms_before: problem.rms_pixels(camera, &active),
        ..Default::default()
    };
    for (k, settings) in rounds.iter().enumerate() {
        let r = problem.solve(camera, noise, settings, &active, abort);
        let interrupted = r.interrupted;
        report.rounds.push(r);
        if interrupted {
            report.interrupted = true;
            break;
        }
        if k + 1 < rounds.len() {
            // exclude gross outliers before refining without them
            for (a, e) in active.iter_mut().zip(problem.normalized_errors(camera, noise)) {
                *a = *a && e.is_some_and(chi2_accepts);
            }
        }
    }
    report.rms_after = problem.rms_pixels(camera, &active);
    for (i, k) in kf_ids.iter().enumerate() {
        if !problem.fixed[i] {
            map.keyframes.get_mut(k).unwrap().pose = problem.poses[i];
        }
    }
    for (i, m) in mp_ids.iter().enumerate() {
        map.points.get_mut(m).unwrap().position = problem.points[i];
    }
    if remove_outliers && !report.interrupted {
        let errs = problem.normalized_errors(camera, noise);
        let mut touched = BTreeSet::new();
        for (o, e) in problem.observations.iter().zip(errs) {
            if !e.is_some_and(chi2_accepts) {
                let (kf, mp) = (kf_ids[o.pose], mp_ids[o.point]);
                if map.points.contains_key(&mp) {
                    map.erase_observation(mp, kf);
                    report.removed_observations += 1;
                    touched.insert(kf);
                }
            }
        }
        for kf in touched {
            let _ = map.update_covisibility(kf);
        }
    }
    report
}

/// Optimizes the anchor, its best covisible keyframes and every point they
/// observe. Other observers of those points stay fixed; if fewer than two
/// keyframes are fixed, the oldest window keyframes are fixed as well.
pub fn local_ba(
    map: &mut Map,
    anchor: KeyFrameId,
    noise: &NoiseModel,
    camera: &FisheyeCamera,
    abort: Option<&AtomicBool>,
    settings: &LocalBaSettings,
) -> Result<MapBaReport, MapError> {
    let mut window: BTreeSet<KeyFrameId> = map.best_covisible(anchor, settings.window)?.into_iter().collect();
    window.insert(anchor);
    window_ba(map, window, noise, camera, abort, settings)
}

/// Bundle adjustment over an explicit keyframe window. Keyframes outside
/// the window that observe its points are held fixed, as is the map origin.
pub fn window_ba(
    map: &mut Map,
    mut window: BTreeSet<KeyFrameId>,
    noise: &NoiseModel,
    camera: &FisheyeCamera,
    abort: Option<&AtomicBool>,
    settings: &LocalBaSettings,
) -> Result<MapBaReport, MapError> {
    if let Some(k) = window.iter().find(|k| !map.keyframes.contains_key(k)) {
        return Err(MapError::KeyFrameNotFound(*k));
    }
    if window.len() < 2 {
        return Ok(MapBaReport { skipped: true, ..Default::default() });
    }
    let mut points = BTreeSet::new();
    for k in &window {
        points.extend(map.keyframes[k].map_points().map(|(_, m)| m));
    }
    let mut fixed = BTreeSet::new();
    for m in &points {
        for kf in map.points[m].observations.keys() {
            if !window.contains(kf) {
                fixed.insert(*kf);
            }
        }
    }
    if let Some(o) = map.origin {
        if window.remove(&o) {
            fixed.insert(o);
        }
    }
    while fixed.len() < 2 && window.len() > 1 {
        let oldest = *window.iter().next().unwrap();
        window.remove(&oldest);
        fixed.insert(oldest);
    }
    let asm = assemble(map, &window, &fixed, &points);
    Ok(run_rounds(map, asm, camera, noise, &[settings.first_round, settings.second_round], abort, true))
}

/// Optimizes every keyframe and point; only the first keyframe is fixed,
/// so the scale gauge stays free.
pub fn full_ba(map: &mut Map, noise: &NoiseModel, camera: &FisheyeCamera, settings: &BaSettings) -> Result<MapBaReport, MapError> {
    let Some(&first) = map.keyframes.keys().next() else {
        return Ok(MapBaReport { skipped: true, ..Default::default() });
    };
    let fixed: BTreeSet<KeyFrameId> = [map.origin.unwrap_or(first)].into_iter().collect();
    let free: BTreeSet<KeyFrameId> = map.keyframes.keys().filter(|k| !fixed.contains(k)).copied().collect();
    if free.is_empty() {
        return Ok(MapBaReport { skipped: true, ..Default::default() });
    }
    let points: BTreeSet<MapPointId> = map.points.keys().copied().collect();
    let asm = assemble(map, &free, &fixed, &points);
    Ok(run_rounds(map, asm, camera, noise, &[*settings, *settings], None, true))
}
