//! JSON dump of a map or atlas for inspection. See `docs/formats.md`.

use serde::{Deserialize, Serialize};

use super::{Atlas, KeyFrameId, Map, MapId, MapPointId};
use crate::camera::PoseRecord;

pub const MAP_DOCUMENT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct AtlasDocument {
    pub version: u32,
    pub active_map: Option<MapId>,
    pub retired_maps: Vec<MapId>,
    pub maps: Vec<MapDocument>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MapDocument {
    pub map_id: MapId,
    pub created_at: f64,
    pub updated_at: f64,
    pub origin: Option<KeyFrameId>,
    pub keyframes: Vec<KeyFrameRecord>,
    pub map_points: Vec<MapPointRecord>,
    pub covisibility: Vec<(KeyFrameId, KeyFrameId, u32)>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KeyFrameRecord {
    pub id: KeyFrameId,
    pub frame_id: u64,
    pub timestamp: f64,
    /// Camera-from-world.
    pub pose: PoseRecord,
    pub parent: Option<KeyFrameId>,
    pub n_keypoints: usize,
    /// `(keypoint index, map point)` pairs.
    pub observations: Vec<(usize, MapPointId)>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MapPointRecord {
    pub id: MapPointId,
    pub position: [f64; 3],
    pub observations: Vec<(KeyFrameId, usize)>,
    pub frames_observed: u32,
}

impl From<&Map> for MapDocument {
    fn from(map: &Map) -> Self {
        MapDocument {
            map_id: map.id,
            created_at: map.created_at,
            updated_at: map.updated_at,
            origin: map.origin,
            keyframes: map
                .keyframes
                .values()
                .map(|kf| KeyFrameRecord {
                    id: kf.id,
                    frame_id: kf.frame_id,
                    timestamp: kf.timestamp,
                    pose: PoseRecord::from(&kf.pose),
                    parent: kf.parent,
                    n_keypoints: kf.keypoints.len(),
                    observations: kf.map_points().collect(),
                })
                .collect(),
            map_points: map
                .points
                .values()
                .map(|p| MapPointRecord {
                    id: p.id,
                    position: [p.position.x, p.position.y, p.position.z],
                    observations: p.observations.iter().map(|(&k, &i)| (k, i)).collect(),
                    frames_observed: p.frames_observed,
                })
                .collect(),
            covisibility: map.covisibility_edges(),
        }
    }
}

impl From<&Atlas> for AtlasDocument {
    fn from(atlas: &Atlas) -> Self {
        AtlasDocument {
            version: MAP_DOCUMENT_VERSION,
            active_map: atlas.active_id(),
            retired_maps: atlas.retired().to_vec(),
            maps: atlas.maps().map(MapDocument::from).collect(),
        }
    }
}

impl AtlasDocument {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}
