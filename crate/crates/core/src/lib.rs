//! Multi-map monocular SLAM with brute-force descriptor matching, evaluated on
//! a deterministic synthetic endoscopy simulator.

pub mod camera;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod io;
pub mod mapping;
pub mod map;
pub mod optim;
pub mod pipeline;
pub mod placerec;
pub mod simulator;
pub mod tracking;

pub use camera::{FisheyeCamera, SE3Pose, Sim3Transform};
pub use features::{MatchPair, OctaveMaskSet};
pub use map::{Atlas, Descriptor, Frame, KeyFrame, KeyFrameId, KeyPoint, Map, MapId, MapPoint, MapPointId};
