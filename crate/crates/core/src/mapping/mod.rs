//! Back end: keyframe insertion, point culling and creation, fusion, local
//! bundle adjustment and keyframe culling.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::AtomicBool;

use nalgebra::Vector3;

use crate::camera::{FisheyeCamera, SE3Pose};
use crate::features::bf_match_bidirectional;
use crate::geometry::triangulate_with;
use crate::map::{Frame, IdSource, KeyFrame, KeyFrameId, Map, MapError, MapPoint, MapPointId};
use crate::optim::{local_ba, skew, LocalBaSettings, MapBaReport, NoiseModel, CHI2_2DOF_95};
use crate::placerec::KeyFrameDatabase;
use crate::tracking::{project_visible, search_by_projection, Candidate, SearchParams};

/// χ² bound (1 dof, 95%) for the point-to-epipolar-line distance.
pub const CHI2_1DOF_95: f64 = 3.84;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MappingParams {
    pub cull_found_ratio: f64,
    /// Points younger than this many keyframes are not judged by observer count.
    pub cull_min_age: u64,
    pub cull_min_observers: usize,
    /// Keyframes after which a new point leaves probation.
    pub recent_window: u64,
    pub creation_neighbors: usize,
    pub creation_nndr: f64,
    pub min_similarity: f64,
    pub parallax_min_deg: f64,
    /// Minimum baseline relative to the neighbor's median depth.
    pub min_baseline_ratio: f64,
    pub fuse_neighbors: usize,
    pub fuse_radius: f64,
    pub kf_redundancy: f64,
    pub redundant_observers: usize,
    pub cull_window: usize,
    pub local_ba: LocalBaSettings,
}

impl Default for MappingParams {
    fn default() -> Self {
        Self {
            cull_found_ratio: 0.25,
            cull_min_age: 2,
            cull_min_observers: 3,
            recent_window: 3,
            creation_neighbors: 5,
            creation_nndr: 0.8,
            min_similarity: 0.6,
            parallax_min_deg: 1.0,
            min_baseline_ratio: 0.01,
            fuse_neighbors: 10,
            fuse_radius: 3.0,
            kf_redundancy: 0.9,
            redundant_observers: 3,
            cull_window: 20,
            local_ba: LocalBaSettings::default(),
        }
    }
}

/// A keyframe removed by culling, with the state needed to re-anchor
/// frames that referenced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CulledKeyFrame {
    pub id: KeyFrameId,
    pub pose: SE3Pose,
    pub depth: f64,
    pub parent: Option<KeyFrameId>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MappingReport {
    pub keyframe: Option<KeyFrameId>,
    pub culled_points: Vec<MapPointId>,
    pub new_points: Vec<MapPointId>,
    pub fused: usize,
    pub ba: Option<MapBaReport>,
    pub culled_keyframes: Vec<CulledKeyFrame>,
}

/// Adds a tracked frame as keyframe `id`: its map point matches become
/// observations, the parent is the reference keyframe and covisibility is
/// updated.
pub fn insert_keyframe(
    map: &mut Map,
    id: KeyFrameId,
    frame: &Frame,
    reference: Option<KeyFrameId>,
    camera: &FisheyeCamera,
    db: Option<&mut KeyFrameDatabase>,
) -> Result<KeyFrameId, MapError> {
    let pose = frame.pose.ok_or_else(|| MapError::InvalidInput(format!("frame {} has no pose", frame.frame_id)))?;
    let mut kf = KeyFrame::from_frame(id, frame, pose, map.id, camera);
    for (&k, &m) in &frame.map_point_matches {
        if k < kf.observations.len() {
            kf.observations[k] = Some(m);
        }
    }
    kf.parent = reference.filter(|r| map.keyframes.contains_key(r));
    let descs: Vec<_> = kf.keypoints.iter().map(|k| k.descriptor.clone()).collect();
    let matched: Vec<MapPointId> = kf.map_points().map(|(_, m)| m).collect();
    map.add_keyframe(kf)?;
    for m in matched {
        map.refresh_descriptor(m)?;
    }
    let edges = map.update_covisibility(id)?;
    if map.keyframes[&id].parent.is_none() {
        map.keyframes.get_mut(&id).unwrap().parent = edges.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|e| e.0);
    }
    if let Some(db) = db {
        db.add(id, map.id, &descs);
    }
    Ok(id)
}

/// Epipolar consistency of two bearings, in units of the second view's σ.
fn epipolar_chi2(pose_1: &SE3Pose, pose_2: &SE3Pose, r1: &Vector3<f64>, r2: &Vector3<f64>, focal: f64, sigma_2: f64) -> f64 {
    let rel = pose_2.compose(&pose_1.inverse());
    let e = skew(&rel.translation) * rel.rotation_matrix();
    let n = e * r1;
    let nn = n.norm() * r2.norm();
    if nn < 1e-15 {
        return f64::INFINITY;
    }
    let d = focal * (r2.dot(&n) / nn);
    (d / sigma_2).powi(2)
}

fn reprojection_ok(camera: &FisheyeCamera, pose: &SE3Pose, p: &Vector3<f64>, pixel: &nalgebra::Vector2<f64>, sigma: f64) -> bool {
    match camera.project(&pose.transform_point(p)) {
        Ok(px) => ((px - pixel).norm_squared() / (sigma * sigma)) <= CHI2_2DOF_95,
        Err(_) => false,
    }
}

pub fn focal(camera: &FisheyeCamera) -> f64 {
    0.5 * (camera.fx + camera.fy)
}

/// Triangulates new points between `kf` and its best covisible neighbors
/// from mutually matched keypoints that carry no point yet.
#[allow(clippy::too_many_arguments)]
pub fn create_map_points(
    map: &mut Map,
    kf: KeyFrameId,
    ids: &mut IdSource<'_>,
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    params: &MappingParams,
) -> Result<Vec<MapPointId>, MapError> {
    let mut neighbors = map.best_covisible(kf, params.creation_neighbors)?;
    if neighbors.is_empty() {
        neighbors.extend(map.keyframe(kf)?.parent);
    }
    let f = focal(camera);
    let mut created = Vec::new();
    for n in neighbors {
        let (Some(k1), Some(k2)) = (map.keyframes.get(&kf), map.keyframes.get(&n)) else { continue };
        let depth = map.median_depth(n).unwrap_or(1.0);
        if (k1.center() - k2.center()).norm() < params.min_baseline_ratio * depth {
            continue;
        }
        let free_1: Vec<usize> = (0..k1.keypoints.len()).filter(|i| k1.observations[*i].is_none()).collect();
        let free_2: Vec<usize> = (0..k2.keypoints.len()).filter(|i| k2.observations[*i].is_none()).collect();
        let d1: Vec<_> = free_1.iter().map(|i| &k1.keypoints[*i].descriptor).collect();
        let d2: Vec<_> = free_2.iter().map(|i| &k2.keypoints[*i].descriptor).collect();
        let m = bf_match_bidirectional(&d1, &d2, params.creation_nndr);
        let mut new_points = Vec::new();
        for p in m.pairs.iter().filter(|p| p.similarity >= params.min_similarity) {
            let (i, j) = (free_1[p.index_a], free_2[p.index_b]);
            let (kp1, kp2) = (&k1.keypoints[i], &k2.keypoints[j]);
            let (s1, s2) = (noise.effective_sigma(kp1.octave), noise.effective_sigma(kp2.octave));
            if epipolar_chi2(&k1.pose, &k2.pose, &k1.rays[i], &k2.rays[j], f, s2) > CHI2_1DOF_95 {
                continue;
            }
            let Ok(t) = triangulate_with(&k1.pose, &k2.pose, &k1.rays[i], &k2.rays[j], params.parallax_min_deg) else { continue };
            if !t.in_front() || t.parallax_deg < params.parallax_min_deg {
                continue;
            }
            if !reprojection_ok(camera, &k1.pose, &t.point, &kp1.pixel, s1) || !reprojection_ok(camera, &k2.pose, &t.point, &kp2.pixel, s2) {
                continue;
            }
            new_points.push((i, j, t.point));
        }
        for (i, j, point) in new_points {
            let k1 = &map.keyframes[&kf];
            let id = ids.map_point();
            let mp = MapPoint {
                id,
                position: point,
                descriptor: k1.keypoints[i].descriptor.clone(),
                observations: BTreeMap::from([(kf, i), (n, j)]),
                map_id: map.id,
                first_kf: kf,
                created_at_kf_count: map.kf_insert_count,
                ref_octave: k1.keypoints[i].octave,
                n_visible: 1,
                n_found: 1,
                frames_observed: 2,
            };
            map.add_map_point(mp)?;
            map.refresh_descriptor(id)?;
            created.push(id);
        }
    }
    if !created.is_empty() {
        map.update_covisibility(kf)?;
    }
    Ok(created)
}

/// Removes probationary points that are rarely found or, after
/// `cull_min_age` keyframes, seen by too few keyframes. Points older than
/// `recent_window` keyframes leave `recent`.
pub fn cull_map_points(map: &mut Map, recent: &mut BTreeSet<MapPointId>, params: &MappingParams) -> Vec<MapPointId> {
    let now = map.kf_insert_count;
    let mut removed = Vec::new();
    let mut graduated = Vec::new();
    for &id in recent.iter() {
        let Some(p) = map.points.get(&id) else {
            graduated.push(id);
            continue;
        };
        let age = now.saturating_sub(p.created_at_kf_count);
        if p.found_ratio() < params.cull_found_ratio || (age >= params.cull_min_age && p.n_observations() < params.cull_min_observers) {
            removed.push(id);
        } else if age >= params.recent_window {
            graduated.push(id);
        }
    }
    for id in &removed {
        map.erase_map_point(*id);
        recent.remove(id);
    }
    for id in graduated {
        recent.remove(&id);
    }
    removed
}

/// Projects points across `kf` and its neighborhood: free keypoints gain an
/// observation, keypoints already carrying another point get the two points
/// fused. Returns the number of changes.
pub fn fuse(map: &mut Map, kf: KeyFrameId, camera: &FisheyeCamera, noise: &NoiseModel, params: &MappingParams) -> Result<usize, MapError> {
    let mut targets: BTreeSet<KeyFrameId> = map.best_covisible(kf, params.fuse_neighbors)?.into_iter().collect();
    for t in targets.clone() {
        targets.extend(map.best_covisible(t, 5)?);
    }
    targets.remove(&kf);
    let search = SearchParams { radius: params.fuse_radius, min_similarity: params.min_similarity, ..SearchParams::default() };
    let mut changes = 0;
    let mut touched = BTreeSet::from([kf]);
    for t in &targets {
        let src: Vec<MapPointId> = map.keyframes[&kf].map_points().map(|(_, m)| m).collect();
        changes += fuse_into(map, *t, &src, camera, noise, &search, &mut touched)?;
    }
    let mut src = BTreeSet::new();
    for t in &targets {
        if let Some(k) = map.keyframes.get(t) {
            src.extend(k.map_points().map(|(_, m)| m));
        }
    }
    let src: Vec<MapPointId> = src.into_iter().collect();
    changes += fuse_into(map, kf, &src, camera, noise, &search, &mut touched)?;
    for k in touched {
        if map.keyframes.contains_key(&k) {
            map.update_covisibility(k)?;
        }
    }
    Ok(changes)
}

fn fuse_into(
    map: &mut Map,
    target: KeyFrameId,
    points: &[MapPointId],
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    search: &SearchParams,
    touched: &mut BTreeSet<KeyFrameId>,
) -> Result<usize, MapError> {
    let Some(k) = map.keyframes.get(&target) else { return Ok(0) };
    let cands: Vec<Candidate> = points
        .iter()
        .filter(|m| map.points.get(m).is_some_and(|p| !p.observations.contains_key(&target)))
        .filter_map(|m| Candidate::from_map(map, *m))
        .collect();
    let taken = vec![false; k.keypoints.len()];
    let (found, _) = search_by_projection(&cands, &k.keypoints, &k.grid, &taken, &k.pose, camera, search);
    let gated: Vec<(usize, MapPointId)> = found
        .into_iter()
        .filter(|f| {
            let kp = &k.keypoints[f.keypoint];
            let s = noise.effective_sigma(kp.octave);
            project_visible(camera, &k.pose, &cands[f.candidate].position, 0.0)
                .is_some_and(|px| (px - kp.pixel).norm_squared() / (s * s) <= CHI2_2DOF_95)
        })
        .map(|f| (f.keypoint, cands[f.candidate].id))
        .collect();
    let mut changes = 0;
    for (idx, mp) in gated {
        let Some(p) = map.points.get(&mp) else { continue };
        if p.observations.contains_key(&target) {
            continue;
        }
        match map.keyframes[&target].observations[idx] {
            None => {
                map.add_observation(mp, target, idx)?;
                touched.insert(target);
            }
            Some(other) if other != mp => {
                let (old, keep) = if map.points[&other].n_observations() > map.points[&mp].n_observations() { (mp, other) } else { (other, mp) };
                touched.extend(map.points[&old].observations.keys().copied());
                touched.extend(map.points[&keep].observations.keys().copied());
                map.replace_map_point(old, keep)?;
                map.refresh_descriptor(keep)?;
            }
            Some(_) => continue,
        }
        changes += 1;
    }
    Ok(changes)
}

/// Removes local keyframes whose points are mostly seen by at least
/// `redundant_observers` other keyframes at the same or a finer octave.
/// `protected` keyframes, the anchor and the map origin are kept.
pub fn cull_keyframes(
    map: &mut Map,
    anchor: KeyFrameId,
    protected: &BTreeSet<KeyFrameId>,
    params: &MappingParams,
    mut db: Option<&mut KeyFrameDatabase>,
) -> Result<Vec<CulledKeyFrame>, MapError> {
    let mut culled = Vec::new();
    for k in map.best_covisible(anchor, params.cull_window)? {
        if k == anchor || Some(k) == map.origin || protected.contains(&k) || map.n_keyframes() <= 2 {
            continue;
        }
        let Some(kf) = map.keyframes.get(&k) else { continue };
        let mut total = 0usize;
        let mut redundant = 0usize;
        for (idx, m) in kf.map_points() {
            let Some(p) = map.points.get(&m) else { continue };
            total += 1;
            let octave = kf.keypoints[idx].octave;
            let others = p
                .observations
                .iter()
                .filter(|(o, _)| **o != k)
                .filter(|(o, i)| map.keyframes.get(o).is_some_and(|ok| ok.keypoints[**i].octave <= octave))
                .count();
            if others >= params.redundant_observers {
                redundant += 1;
            }
        }
        if total == 0 || (redundant as f64) < params.kf_redundancy * total as f64 {
            continue;
        }
        let rec = CulledKeyFrame { id: k, pose: kf.pose, depth: map.median_depth(k).unwrap_or(1.0), parent: kf.parent };
        let removed = map.erase_keyframe(k)?;
        let parent = removed.parent.filter(|p| map.keyframes.contains_key(p)).or(map.origin);
        if let Some(db) = db.as_deref_mut() {
            db.remove(k);
        }
        culled.push(CulledKeyFrame { parent, ..rec });
    }
    Ok(culled)
}

/// Per-map back end state.
#[derive(Clone, Debug, Default)]
pub struct LocalMapper {
    pub params: MappingParams,
    pub recent: BTreeSet<MapPointId>,
}

impl LocalMapper {
    pub fn new(params: MappingParams) -> Self {
        Self { params, recent: BTreeSet::new() }
    }

    /// Runs one mapping cycle for a new keyframe.
    #[allow(clippy::too_many_arguments)]
    pub fn process(
        &mut self,
        map: &mut Map,
        ids: &mut IdSource<'_>,
        mut db: Option<&mut KeyFrameDatabase>,
        frame: &Frame,
        reference: Option<KeyFrameId>,
        camera: &FisheyeCamera,
        noise: &NoiseModel,
        abort: Option<&AtomicBool>,
        protected: &BTreeSet<KeyFrameId>,
    ) -> Result<MappingReport, MapError> {
        let id = ids.keyframe();
        insert_keyframe(map, id, frame, reference, camera, db.as_deref_mut())?;
        let mut report = MappingReport { keyframe: Some(id), ..Default::default() };
        report.culled_points = cull_map_points(map, &mut self.recent, &self.params);
        report.new_points = create_map_points(map, id, ids, camera, noise, &self.params)?;
        self.recent.extend(report.new_points.iter().copied());
        report.fused = fuse(map, id, camera, noise, &self.params)?;
        if map.n_keyframes() > 2 {
            report.ba = Some(local_ba(map, id, noise, camera, abort, &self.params.local_ba)?);
        }
        report.culled_keyframes = cull_keyframes(map, id, protected, &self.params, db)?;
        Ok(report)
    }

    /// Clears probation state when the active map changes.
    pub fn reset(&mut self) {
        self.recent.clear();
    }
}

#[cfg(test)]
mod tests;
