use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{KeyFrameDatabase, RelocParams};
use crate::camera::{FisheyeCamera, SE3Pose};
use crate::features::bf_match_bidirectional;
use crate::geometry::{pnp_ransac, Correspondence2D3D, RansacParams};
use crate::map::{Atlas, Frame, KeyFrameId, KeypointGrid, MapId, MapPointId};
use crate::optim::{NoiseModel, CHI2_2DOF_95};
use crate::tracking::{local_keyframes, track_local_map, TrackingParams};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RelocFailure {
    #[error("no candidate keyframe")]
    NoCandidate,
    #[error("no candidate passed PnP RANSAC")]
    RansacFailed,
    #[error("guided refinement kept too few inliers")]
    RefineFailed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Relocalization {
    pub map: MapId,
    pub keyframe: KeyFrameId,
    pub pose: SE3Pose,
    pub matches: BTreeMap<usize, MapPointId>,
    /// Local map points inside the final view.
    pub visible: Vec<MapPointId>,
}

/// Recovers the pose of `frame` against the map it was last tracked in.
#[allow(clippy::too_many_arguments)]
pub fn relocalize(
    frame: &Frame,
    atlas: &Atlas,
    db: &KeyFrameDatabase,
    last_map: MapId,
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    params: &RelocParams,
    tracking: &TrackingParams,
    seed: u64,
) -> Result<Relocalization, RelocFailure> {
    let map = atlas.map(last_map).map_err(|_| RelocFailure::NoCandidate)?;
    let descs: Vec<_> = frame.keypoints.iter().map(|k| k.descriptor.clone()).collect();
    let q = db.query_for(&descs);
    let mut cands = db.query(&q, &BTreeSet::new(), Some(last_map), params.relative_score, params.min_score);
    cands.retain(|(k, _)| map.keyframes.contains_key(k));
    cands.truncate(params.n_candidates);
    if cands.is_empty() {
        return Err(RelocFailure::NoCandidate);
    }
    let grid = KeypointGrid::build(&frame.keypoints, camera.width, camera.height);
    let mut refine = *tracking;
    refine.theta_track = params.final_inliers;
    let mut any_ransac = false;
    for (kc, _) in cands {
        let kf = &map.keyframes[&kc];
        let idx: Vec<(usize, MapPointId)> = kf.map_points().collect();
        let kdescs: Vec<_> = idx.iter().map(|(i, _)| &kf.keypoints[*i].descriptor).collect();
        let m = bf_match_bidirectional(&descs, &kdescs, params.nndr);
        let corrs: Vec<Correspondence2D3D> = m
            .pairs
            .iter()
            .filter(|p| p.similarity >= params.min_similarity)
            .filter_map(|p| {
                let kp = &frame.keypoints[p.index_a];
                let bearing = camera.unproject(&kp.pixel).ok()?;
                Some(Correspondence2D3D {
                    pixel: kp.pixel,
                    bearing,
                    octave: kp.octave,
                    point: map.points.get(&idx[p.index_b].1)?.position,
                    index_2d: p.index_a,
                    index_3d: p.index_b,
                })
            })
            .collect();
        let ransac = RansacParams {
            max_iterations: params.ransac_iterations,
            inlier_threshold: CHI2_2DOF_95,
            min_inliers_accept: params.ransac_inliers,
            confidence: 0.999,
            rng_seed: seed ^ kc.0,
        };
        let Ok((pose, inliers)) = pnp_ransac(&corrs, camera, noise, &ransac) else {
            continue;
        };
        let preset: BTreeMap<usize, MapPointId> =
            corrs.iter().zip(&inliers).filter(|(_, i)| **i).map(|(c, _)| (c.index_2d, idx[c.index_3d].1)).collect();
        if preset.len() < params.ransac_inliers {
            continue;
        }
        any_ransac = true;
        let seeds: Vec<MapPointId> = preset.values().copied().collect();
        let local = local_keyframes(map, Some(kc), &seeds, tracking.local_keyframes);
        if let Ok(t) = track_local_map(frame, &grid, &pose, map, &local, &preset, camera, noise, &refine) {
            return Ok(Relocalization { map: last_map, keyframe: kc, pose: t.pose, matches: t.matches, visible: t.visible });
        }
    }
    Err(if any_ransac { RelocFailure::RefineFailed } else { RelocFailure::RansacFailed })
}
