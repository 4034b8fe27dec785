//! World model: frames, keyframes, map points, covisibility and the atlas.

mod atlas;
mod descriptor;
mod document;
mod graph;
mod types;

pub use atlas::{Atlas, IdSource};
pub use descriptor::{Descriptor, DescriptorError, DESCRIPTOR_LEN, NORM_TOLERANCE};
pub use document::{AtlasDocument, KeyFrameRecord, MapDocument, MapPointRecord, MAP_DOCUMENT_VERSION};
pub use graph::{Map, DEFAULT_COVIS_THRESHOLD, MIN_POINT_OBSERVATIONS};
pub use types::{
    Frame, KeyFrame, KeyFrameId, KeyPoint, KeypointGrid, LandmarkTag, MapId, MapPoint, MapPointId,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("keyframe {0} not found")]
    KeyFrameNotFound(KeyFrameId),
    #[error("map point {0} not found")]
    PointNotFound(MapPointId),
    #[error("map {0} not found")]
    MapNotFound(MapId),
    #[error("keyframe {0} already present")]
    DuplicateKeyFrame(KeyFrameId),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("integrity violation: {0}")]
    Integrity(String),
}

/// See [`Map::update_covisibility`].
pub fn update_covisibility(
    map: &mut Map,
    kf: KeyFrameId,
) -> Result<Vec<(KeyFrameId, u32)>, MapError> {
    map.update_covisibility(kf)
}

/// See [`Map::best_covisible`].
pub fn best_covisible(map: &Map, kf: KeyFrameId, n: usize) -> Result<Vec<KeyFrameId>, MapError> {
    map.best_covisible(kf, n)
}

/// See [`Map::representative_descriptor`].
pub fn select_representative_descriptor(
    map: &Map,
    mp: MapPointId,
) -> Result<Descriptor, MapError> {
    map.representative_descriptor(mp)
}

#[cfg(test)]
pub(crate) mod testutil {
    use std::collections::BTreeMap;

    use nalgebra::{Vector2, Vector3};

    use super::*;
    use crate::camera::SE3Pose;

    pub fn keyframe(id: u64, n_keypoints: usize) -> KeyFrame {
        let keypoints: Vec<KeyPoint> = (0..n_keypoints)
            .map(|i| KeyPoint {
                pixel: Vector2::new((i % 40) as f64 * 10.0, (i / 40) as f64 * 10.0),
                octave: 0,
                descriptor: Descriptor::basis(i),
                intensity: 0.2,
            })
            .collect();
        KeyFrame {
            id: KeyFrameId(id),
            frame_id: id,
            timestamp: id as f64,
            pose: SE3Pose::identity(),
            rays: vec![Vector3::z(); n_keypoints],
            observations: vec![None; n_keypoints],
            map_id: MapId(0),
            gt_landmarks: None,
            parent: None,
            grid: KeypointGrid::build(&keypoints, 640, 480),
            keypoints,
        }
    }

    pub fn point(id: u64, obs: &[(u64, usize)]) -> MapPoint {
        MapPoint {
            id: MapPointId(id),
            position: Vector3::new(0.0, 0.0, 1.0),
            descriptor: Descriptor::basis(0),
            observations: obs.iter().map(|&(k, i)| (KeyFrameId(k), i)).collect::<BTreeMap<_, _>>(),
            map_id: MapId(0),
            first_kf: KeyFrameId(obs[0].0),
            created_at_kf_count: 0,
            ref_octave: 0,
            n_visible: 0,
            n_found: 0,
            frames_observed: obs.len() as u32,
        }
    }

    /// Map whose keyframes observe the given point-id sets (keypoint index = position in set).
    pub fn map_with_sets(sets: &[Vec<u64>]) -> Map {
        let mut map = Map::new(MapId(0), 0.0, DEFAULT_COVIS_THRESHOLD);
        let n = sets.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        for (k, _) in sets.iter().enumerate() {
            map.add_keyframe(keyframe(k as u64, n)).unwrap();
        }
        let mut owners: BTreeMap<u64, Vec<(u64, usize)>> = BTreeMap::new();
        for (k, set) in sets.iter().enumerate() {
            for (i, &p) in set.iter().enumerate() {
                owners.entry(p).or_default().push((k as u64, i));
            }
        }
        for (p, obs) in owners {
            map.add_map_point(point(p, &obs)).unwrap();
        }
        for k in 0..sets.len() {
            map.update_covisibility(KeyFrameId(k as u64)).unwrap();
        }
        map
    }
}
