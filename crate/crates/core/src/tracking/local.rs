use std::collections::{BTreeMap, BTreeSet};

use super::search::{project_visible, search_by_projection, Candidate};
use super::{TrackingError, TrackingParams};
use crate::camera::{FisheyeCamera, SE3Pose};
use crate::features::bf_match_bidirectional;
use crate::map::{Frame, KeyFrameId, KeypointGrid, Map, MapPointId};
use crate::optim::{pose_only_optimize, NoiseModel, PoseObservation, PoseOnlySettings};

#[derive(Clone, Debug)]
pub struct LocalTrack {
    pub pose: SE3Pose,
    /// Inlier keypoint → map point.
    pub matches: BTreeMap<usize, MapPointId>,
    /// Local points projecting inside the image under the final pose.
    pub visible: Vec<MapPointId>,
}

impl LocalTrack {
    pub fn n_inliers(&self) -> usize {
        self.matches.len()
    }
}

/// Constant-velocity prediction: `velocity · last`, or `last` without a
/// velocity. No prediction without a previous pose.
pub fn predict_pose(last: Option<&SE3Pose>, velocity: Option<&SE3Pose>) -> Option<SE3Pose> {
    let last = last?;
    Some(match velocity {
        Some(v) => v.compose(last),
        None => *last,
    })
}

/// Keyframes observing the previously matched points (most shared first),
/// completed with the reference keyframe's covisible neighbors, at most
/// `n` in total.
pub fn local_keyframes(map: &Map, reference: Option<KeyFrameId>, last_matches: &[MapPointId], n: usize) -> Vec<KeyFrameId> {
    let mut counts: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
    for m in last_matches {
        if let Some(p) = map.points.get(m) {
            for kf in p.observations.keys() {
                *counts.entry(*kf).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(KeyFrameId, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<KeyFrameId> = Vec::new();
    let mut seen = BTreeSet::new();
    if let Some(r) = reference.filter(|r| map.keyframes.contains_key(r)) {
        out.push(r);
        seen.insert(r);
    }
    for (k, _) in ranked {
        if out.len() >= n {
            break;
        }
        if seen.insert(k) {
            out.push(k);
        }
    }
    if let Some(r) = reference.filter(|r| map.keyframes.contains_key(r)) {
        for k in map.best_covisible(r, n).unwrap_or_default() {
            if out.len() >= n {
                break;
            }
            if seen.insert(k) {
                out.push(k);
            }
        }
    }
    out
}

fn local_candidates(map: &Map, kfs: &[KeyFrameId], skip: &BTreeSet<MapPointId>) -> Vec<Candidate> {
    let mut ids = BTreeSet::new();
    for k in kfs {
        if let Some(kf) = map.keyframes.get(k) {
            ids.extend(kf.map_points().map(|(_, m)| m));
        }
    }
    ids.into_iter().filter(|m| !skip.contains(m)).filter_map(|m| Candidate::from_map(map, m)).collect()
}

fn optimize(
    frame: &Frame,
    map: &Map,
    pose: &SE3Pose,
    matches: &BTreeMap<usize, MapPointId>,
    camera: &FisheyeCamera,
    noise: &NoiseModel,
) -> Option<(SE3Pose, BTreeMap<usize, MapPointId>)> {
    let pairs: Vec<(usize, MapPointId)> = matches.iter().filter(|(_, m)| map.points.contains_key(m)).map(|(k, m)| (*k, *m)).collect();
    let obs: Vec<PoseObservation> = pairs
        .iter()
        .map(|(k, m)| PoseObservation { point: map.points[m].position, pixel: frame.keypoints[*k].pixel, octave: frame.keypoints[*k].octave })
        .collect();
    let r = pose_only_optimize(pose, &obs, noise, camera, &PoseOnlySettings::default()).ok()?;
    let kept = pairs.into_iter().zip(&r.inliers).filter(|(_, i)| **i).map(|(p, _)| p).collect();
    Some((r.pose, kept))
}

/// Projection matching of the local map followed by pose-only refinement,
/// in two passes (prediction window, then a tight window around the
/// refined pose). `preset` matches are kept as seeds.
#[allow(clippy::too_many_arguments)]
pub fn track_local_map(
    frame: &Frame,
    grid: &KeypointGrid,
    predicted: &SE3Pose,
    map: &Map,
    local_kfs: &[KeyFrameId],
    preset: &BTreeMap<usize, MapPointId>,
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    params: &TrackingParams,
) -> Result<LocalTrack, TrackingError> {
    let mut matches = preset.clone();
    let mut pose = *predicted;
    let radii = [params.search.radius, params.refine_radius];
    let mut all: Vec<Candidate> = Vec::new();
    for (pass, radius) in radii.into_iter().enumerate() {
        let used: BTreeSet<MapPointId> = matches.values().copied().collect();
        let cands = local_candidates(map, local_kfs, &used);
        let mut taken = vec![false; frame.keypoints.len()];
        for k in matches.keys() {
            taken[*k] = true;
        }
        let (found, _) = search_by_projection(&cands, &frame.keypoints, grid, &taken, &pose, camera, &params.search.with_radius(radius));
        for m in found {
            matches.insert(m.keypoint, cands[m.candidate].id);
        }
        let Some((p, kept)) = optimize(frame, map, &pose, &matches, camera, noise) else {
            return Err(TrackingError::Failure { inliers: 0 });
        };
        pose = p;
        matches = kept;
        if pass == 0 && matches.len() < params.theta_track / 2 {
            return Err(TrackingError::Failure { inliers: matches.len() });
        }
        if pass + 1 == radii.len() {
            all = local_candidates(map, local_kfs, &BTreeSet::new());
        }
    }
    if matches.len() < params.theta_track {
        return Err(TrackingError::Failure { inliers: matches.len() });
    }
    let visible = all.iter().filter(|c| project_visible(camera, &pose, &c.position, 0.0).is_some()).map(|c| c.id).collect();
    Ok(LocalTrack { pose, matches, visible })
}

/// Descriptor search against the map points of one keyframe, refined from
/// `initial`.
#[allow(clippy::too_many_arguments)]
pub fn track_reference_keyframe(
    frame: &Frame,
    kf: KeyFrameId,
    map: &Map,
    initial: &SE3Pose,
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    params: &TrackingParams,
) -> Result<(SE3Pose, BTreeMap<usize, MapPointId>), TrackingError> {
    let k = map.keyframes.get(&kf).ok_or_else(|| TrackingError::InvalidInput(format!("{kf} not in map")))?;
    let idx: Vec<(usize, MapPointId)> = k.map_points().collect();
    let descs: Vec<_> = idx.iter().map(|(i, _)| &k.keypoints[*i].descriptor).collect();
    let fdescs: Vec<_> = frame.keypoints.iter().map(|kp| &kp.descriptor).collect();
    let m = bf_match_bidirectional(&fdescs, &descs, params.nndr);
    let matches: BTreeMap<usize, MapPointId> = m
        .pairs
        .iter()
        .filter(|p| p.similarity >= params.search.min_similarity)
        .map(|p| (p.index_a, idx[p.index_b].1))
        .collect();
    if matches.len() < params.theta_track {
        return Err(TrackingError::Failure { inliers: matches.len() });
    }
    let (pose, kept) = optimize(frame, map, initial, &matches, camera, noise).ok_or(TrackingError::Failure { inliers: 0 })?;
    if kept.len() < params.theta_track {
        return Err(TrackingError::Failure { inliers: kept.len() });
    }
    Ok((pose, kept))
}

/// Promote iff the frame lost enough of the reference keyframe's points or
/// the keyframe interval elapsed, and tracking is healthy, and the mapping
/// queue has room.
pub fn keyframe_decision(
    params: &TrackingParams,
    n_matches: usize,
    reference_tracked: usize,
    frames_since_last_kf: usize,
    queue_len: usize,
) -> bool {
    let needed = (n_matches as f64) < params.kf_match_ratio * reference_tracked as f64 || frames_since_last_kf >= params.max_kf_interval;
    needed && n_matches >= params.theta_track && queue_len <= params.queue_cap
}
