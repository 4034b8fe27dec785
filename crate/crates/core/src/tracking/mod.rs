//! Frame-rate front end: prediction, local-map tracking, keyframe
//! decision, loss recovery and monocular initialization.

mod init;
mod local;
pub mod search;
mod tracker;

pub use init::{initialize_two_view, point_distribution_check, InitRejection, TwoViewInit, CHI2_95_ELLIPSE};
pub use local::{keyframe_decision, local_keyframes, predict_pose, track_local_map, track_reference_keyframe, LocalTrack};
pub use search::{project_visible, search_by_projection, Candidate, ProjectionMatch, SearchParams};
pub use tracker::{FrameAnchor, KeyFrameRequest, TrackOutput, Tracker, TrackerEvent, TrackingState};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::PoseRecord;
use crate::map::{KeyFrameId, MapId};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingParams {
    /// Inliers needed to keep tracking.
    pub theta_track: usize,
    pub max_kf_interval: usize,
    /// A keyframe is needed below this fraction of the reference keyframe's points.
    pub kf_match_ratio: f64,
    pub queue_cap: usize,
    /// Disparity window for initialization matching (px).
    pub disp_win: f64,
    pub theta_init: usize,
    /// Mean reprojection error bound in units of the mean σ of the matches.
    pub eps_init: f64,
    pub parallax_min_deg: f64,
    pub theta_ellipse: f64,
    /// Epipolar RANSAC tolerance (px).
    pub init_epipolar_px: f64,
    /// Frames after which a pending initialization reference is replaced.
    pub init_max_gap: u64,
    pub nndr: f64,
    pub search: SearchParams,
    /// Window radius of the second, pose-refined projection pass (px).
    pub refine_radius: f64,
    pub local_keyframes: usize,
}

impl Default for TrackingParams {
    fn default() -> Self {
        Self {
            theta_track: 15,
            max_kf_interval: 30,
            kf_match_ratio: 0.9,
            queue_cap: 3,
            disp_win: 100.0,
            theta_init: 100,
            eps_init: 2.0,
            parallax_min_deg: 1.0,
            theta_ellipse: 0.5,
            init_epipolar_px: 2.0,
            init_max_gap: 30,
            nndr: 0.8,
            search: SearchParams::default(),
            refine_radius: 4.0,
            local_keyframes: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrackingMode {
    NotInitialized,
    Ok,
    Lost,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrackOutcome {
    Tracked,
    Relocalized,
    Lost,
    Initialized,
}

impl TrackOutcome {
    pub fn is_localized(self) -> bool {
        self != TrackOutcome::Lost
    }
}

/// Per-frame tracking record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub frame_id: u64,
    pub timestamp: f64,
    pub outcome: TrackOutcome,
    /// Camera-from-world at tracking time.
    pub pose: Option<PoseRecord>,
    pub map_id: Option<MapId>,
    /// Map points matched as inliers.
    pub n_matches: usize,
    pub reference_kf: Option<KeyFrameId>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("tracking failure with {inliers} inliers")]
    Failure { inliers: usize },
}
