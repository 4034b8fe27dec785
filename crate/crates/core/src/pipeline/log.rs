use serde::{Deserialize, Serialize};

use crate::map::{KeyFrameId, MapId};
use crate::tracking::{TrackOutcome, TrackResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunEvent {
    MapCreated { frame_id: u64, timestamp: f64, map: MapId, keyframes: [KeyFrameId; 2] },
    Loss { frame_id: u64, timestamp: f64 },
    Relocation { frame_id: u64, timestamp: f64, map: MapId, keyframe: KeyFrameId, n_inliers: usize },
    Merge {
        frame_id: u64,
        timestamp: f64,
        ka: KeyFrameId,
        km: KeyFrameId,
        /// Absorbed map.
        map_a: MapId,
        /// Surviving map.
        map_m: MapId,
        n_pairs: usize,
        n_fused: usize,
        /// Pairs whose two points carry the same GT landmark.
        gt_agree: usize,
        gt_labelled: usize,
    },
}

impl RunEvent {
    pub fn frame_id(&self) -> u64 {
        match self {
            RunEvent::MapCreated { frame_id, .. }
            | RunEvent::Loss { frame_id, .. }
            | RunEvent::Relocation { frame_id, .. }
            | RunEvent::Merge { frame_id, .. } => *frame_id,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub results: Vec<TrackResult>,
    pub events: Vec<RunEvent>,
}

impl RunLog {
    pub fn n_frames(&self) -> usize {
        self.results.len()
    }

    pub fn n_localized(&self) -> usize {
        self.results.iter().filter(|r| r.outcome.is_localized()).count()
    }

    pub fn n_merges(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, RunEvent::Merge { .. })).count()
    }

    pub fn n_relocations(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, RunEvent::Relocation { .. })).count()
    }

    pub fn n_maps_created(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, RunEvent::MapCreated { .. })).count()
    }

    /// Events agree with outcomes and timestamps never decrease.
    pub fn check_consistency(&self) -> Result<(), String> {
        for w in self.results.windows(2) {
            if w[1].timestamp < w[0].timestamp {
                return Err(format!("timestamps decrease at frame {}", w[1].frame_id));
            }
        }
        let outcome = |f: u64| self.results.iter().find(|r| r.frame_id == f).map(|r| r.outcome);
        for e in &self.events {
            let expected = match e {
                RunEvent::MapCreated { .. } => Some(TrackOutcome::Initialized),
                RunEvent::Relocation { .. } => Some(TrackOutcome::Relocalized),
                _ => None,
            };
            if let Some(x) = expected {
                if outcome(e.frame_id()) != Some(x) {
                    return Err(format!("event at frame {} does not match its outcome", e.frame_id()));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}
