use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::Descriptor;
use crate::camera::{FisheyeCamera, SE3Pose};

macro_rules! id_type {
    ($name:ident, $inner:ty, $prefix:literal) => {
        #[derive(
            Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(MapId, u32, "M");
id_type!(KeyFrameId, u64, "KF");
id_type!(MapPointId, u64, "MP");

/// Ground-truth landmark tag carried by simulated keypoints; `-1` marks a
/// spurious detection.
pub type LandmarkTag = i64;

#[derive(Clone, Debug, PartialEq)]
pub struct KeyPoint {
    pub pixel: Vector2<f64>,
    pub octave: u8,
    pub descriptor: Descriptor,
    pub intensity: f32,
}

impl AsRef<Descriptor> for KeyPoint {
    fn as_ref(&self) -> &Descriptor {
        &self.descriptor
    }
}

/// Uniform-grid spatial index over keypoint pixels.
#[derive(Clone, Debug, Default)]
pub struct KeypointGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<u32>>,
}

impl KeypointGrid {
    pub const CELL_PX: f64 = 16.0;

    pub fn build(keypoints: &[KeyPoint], width: u32, height: u32) -> Self {
        let cell = Self::CELL_PX;
        let cols = ((width as f64 / cell).ceil() as usize).max(1);
        let rows = ((height as f64 / cell).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, kp) in keypoints.iter().enumerate() {
            let cx = ((kp.pixel.x / cell).floor().max(0.0) as usize).min(cols - 1);
            let cy = ((kp.pixel.y / cell).floor().max(0.0) as usize).min(rows - 1);
            cells[cy * cols + cx].push(i as u32);
        }
        Self {
            cell,
            cols,
            rows,
            cells,
        }
    }

    /// Indices whose pixel lies within `radius` of `center`, in ascending order.
    pub fn query(&self, keypoints: &[KeyPoint], center: &Vector2<f64>, radius: f64) -> Vec<usize> {
        if self.cells.is_empty() {
            return Vec::new();
        }
        let x0 = ((center.x - radius) / self.cell).floor().max(0.0) as usize;
        let y0 = ((center.y - radius) / self.cell).floor().max(0.0) as usize;
        let x1 = ((center.x + radius) / self.cell).floor();
        let y1 = ((center.y + radius) / self.cell).floor();
        if x1 < 0.0 || y1 < 0.0 {
            return Vec::new();
        }
        let x1 = (x1 as usize).min(self.cols - 1);
        let y1 = (y1 as usize).min(self.rows - 1);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                for &i in &self.cells[cy * self.cols + cx] {
                    let d = keypoints[i as usize].pixel - center;
                    if d.norm_squared() <= r2 {
                        out.push(i as usize);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub keypoints: Vec<KeyPoint>,
    /// Ground-truth landmark per keypoint, when the source provides it.
    pub gt_landmarks: Option<Vec<LandmarkTag>>,
    pub pose: Option<SE3Pose>,
    pub map_point_matches: BTreeMap<usize, MapPointId>,
}

impl Frame {
    pub fn new(frame_id: u64, timestamp: f64, keypoints: Vec<KeyPoint>) -> Self {
        Self {
            frame_id,
            timestamp,
            keypoints,
            gt_landmarks: None,
            pose: None,
            map_point_matches: BTreeMap::new(),
        }
    }

    /// Keeps only the keypoints flagged `true`, preserving ground truth alignment.
    pub fn retain_keypoints(&mut self, keep: &[bool]) {
        debug_assert_eq!(keep.len(), self.keypoints.len());
        let mut it = keep.iter();
        self.keypoints.retain(|_| *it.next().unwrap());
        if let Some(gt) = self.gt_landmarks.as_mut() {
            let mut it = keep.iter();
            gt.retain(|_| *it.next().unwrap());
        }
        self.map_point_matches.clear();
    }
}

#[derive(Clone, Debug)]
pub struct KeyFrame {
    pub id: KeyFrameId,
    pub frame_id: u64,
    pub timestamp: f64,
    pub pose: SE3Pose,
    pub keypoints: Vec<KeyPoint>,
    /// Unit bearing rays of the keypoints in the camera frame.
    pub rays: Vec<Vector3<f64>>,
    /// Slot per keypoint.
    pub observations: Vec<Option<MapPointId>>,
    pub map_id: MapId,
    pub gt_landmarks: Option<Vec<LandmarkTag>>,
    /// Spanning-tree parent.
    pub parent: Option<KeyFrameId>,
    pub grid: KeypointGrid,
}

impl KeyFrame {
    /// Builds a keyframe from a tracked frame. Observation slots are empty;
    /// they are filled when the keyframe is registered with its map.
    pub fn from_frame(
        id: KeyFrameId,
        frame: &Frame,
        pose: SE3Pose,
        map_id: MapId,
        camera: &FisheyeCamera,
    ) -> Self {
        let rays = frame
            .keypoints
            .iter()
            .map(|kp| {
                camera
                    .unproject(&kp.pixel)
                    .unwrap_or_else(|_| Vector3::new(0.0, 0.0, 1.0))
            })
            .collect();
        Self {
            id,
            frame_id: frame.frame_id,
            timestamp: frame.timestamp,
            pose,
            keypoints: frame.keypoints.clone(),
            rays,
            observations: vec![None; frame.keypoints.len()],
            map_id,
            gt_landmarks: frame.gt_landmarks.clone(),
            parent: None,
            grid: KeypointGrid::build(&frame.keypoints, camera.width, camera.height),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    pub fn n_tracked(&self) -> usize {
        self.observations.iter().filter(|o| o.is_some()).count()
    }

    pub fn map_points(&self) -> impl Iterator<Item = (usize, MapPointId)> + '_ {
        self.observations
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.map(|m| (i, m)))
    }

    pub fn keypoints_near(&self, center: &Vector2<f64>, radius: f64) -> Vec<usize> {
        self.grid.query(&self.keypoints, center, radius)
    }

    pub fn gt_tag(&self, idx: usize) -> Option<LandmarkTag> {
        self.gt_landmarks.as_ref().map(|g| g[idx])
    }
}

#[derive(Clone, Debug)]
pub struct MapPoint {
    pub id: MapPointId,
    pub position: Vector3<f64>,
    pub descriptor: Descriptor,
    /// Observing keyframe → keypoint index.
    pub observations: BTreeMap<KeyFrameId, usize>,
    pub map_id: MapId,
    /// Keyframe that triangulated the point.
    pub first_kf: KeyFrameId,
    /// Value of the map's keyframe insertion counter at creation.
    pub created_at_kf_count: u64,
    /// Octave of the reference observation; drives search windows.
    pub ref_octave: u8,
    /// Times the point was predicted inside a tracked frame.
    pub n_visible: u32,
    /// Times it was matched as an inlier in a tracked frame.
    pub n_found: u32,
    /// Frames (keyframes and tracked frames) that observed the point.
    pub frames_observed: u32,
}

impl MapPoint {
    pub fn n_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn found_ratio(&self) -> f64 {
        if self.n_visible == 0 {
            1.0
        } else {
            self.n_found as f64 / self.n_visible as f64
        }
    }
}
