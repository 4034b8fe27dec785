//! Deterministic synthetic endoscopy: a textured tube, a scripted camera
//! path and per-frame keypoints with ground truth.

mod render;
mod scenario;
mod scene;
mod sequence;
mod trajectory;

pub use render::{landmark_position, render_frame, ClutterSpec, Occlusion, Revisit, SensorSpec, SyntheticFrame};
pub use scenario::{default_camera, Scenario, WITHDRAW_SPEED};
pub use scene::{generate_scene, random_descriptor, Landmark, Scene, SceneSpec};
pub use sequence::{gt_entries, generate_sequence, load_sequence_dir, LoadedSequence, SceneMeta, SyntheticSequence, SEQUENCE_FORMAT_VERSION};
pub use trajectory::{camera_pose, generate_trajectory, GtTrajectory, Segment, TrajectorySpec};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("malformed sequence: {0}")]
    Format(String),
}

impl From<std::io::Error> for SimError {
    fn from(e: std::io::Error) -> Self {
        SimError::Io(e.to_string())
    }
}
