use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{generate_scene, generate_trajectory, render_frame, GtTrajectory, Scenario, Scene, SimError, SyntheticFrame};
use crate::features::{read_feature_file, write_feature_file, FeatureRecord};
use crate::io::{read_trajectory_file, write_trajectory_file, TrajectoryEntry};
use crate::camera::FisheyeCamera;
use crate::map::Frame;

pub const SEQUENCE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    pub scenario: Scenario,
    pub scene: Scene,
    pub frames: Vec<SyntheticFrame>,
    pub gt: GtTrajectory,
}

/// Contents of `scene_meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub format_version: u32,
    pub n_frames: usize,
    pub path_length: f64,
    pub scenario: Scenario,
}

pub fn generate_sequence(scenario: &Scenario) -> Result<SyntheticSequence, SimError> {
    scenario.camera.validate().map_err(|e| SimError::InvalidInput(e.to_string()))?;
    let scene = generate_scene(&scenario.scene, scenario.seed)?;
    let gt = generate_trajectory(&scenario.scene, &scenario.trajectory)?;
    for o in &scenario.clutter.occlusions {
        if !(0.0..=1.0).contains(&o.dropout) || o.start > o.end || o.end > gt.len() {
            return Err(SimError::InvalidInput(format!("bad occlusion {}..{}", o.start, o.end)));
        }
    }
    let frames = gt
        .poses
        .iter()
        .zip(&gt.timestamps)
        .enumerate()
        .map(|(k, (pose, t))| {
            render_frame(&scene, pose, &scenario.camera, &scenario.sensor, &scenario.clutter, k as u64, *t, scenario.seed)
        })
        .collect();
    Ok(SyntheticSequence { scenario: scenario.clone(), scene, frames, gt })
}

pub fn gt_entries(gt: &GtTrajectory) -> Vec<TrajectoryEntry> {
    gt.poses
        .iter()
        .zip(&gt.timestamps)
        .map(|(p, t)| TrajectoryEntry { timestamp: *t, pose_wc: p.inverse(), map_id: 0 })
        .collect()
}

impl SyntheticSequence {
    pub fn input_frames(&self) -> Vec<Frame> {
        self.frames.iter().map(SyntheticFrame::to_frame).collect()
    }

    pub fn gt_centers(&self) -> Vec<Vector3<f64>> {
        self.gt.poses.iter().map(|p| p.center()).collect()
    }

    pub fn meta(&self) -> SceneMeta {
        SceneMeta {
            format_version: SEQUENCE_FORMAT_VERSION,
            n_frames: self.frames.len(),
            path_length: self.gt.path_length(),
            scenario: self.scenario.clone(),
        }
    }

    /// Writes `gt_trajectory.txt`, `frames/NNNNNN.feat` and `scene_meta.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<(), SimError> {
        fs::create_dir_all(dir.join("frames"))?;
        for f in &self.frames {
            let rec = FeatureRecord {
                frame_id: f.frame_id,
                timestamp: f.timestamp,
                keypoints: f.keypoints.clone(),
                gt_landmarks: Some(f.gt_landmarks.clone()),
            };
            let mut w = BufWriter::new(File::create(dir.join("frames").join(format!("{:06}.feat", f.frame_id)))?);
            write_feature_file(&mut w, &rec).map_err(|e| SimError::Io(e.to_string()))?;
            w.flush()?;
        }
        write_trajectory_file(&dir.join("gt_trajectory.txt"), &gt_entries(&self.gt)).map_err(|e| SimError::Io(e.to_string()))?;
        let json = serde_json::to_string_pretty(&self.meta()).map_err(|e| SimError::Io(e.to_string()))?;
        fs::write(dir.join("scene_meta.json"), json + "\n")?;
        Ok(())
    }
}

/// A sequence directory read back from disk. `scene_meta.json` is optional;
/// without it the frames are taken in file-name order and no calibration is
/// known.
#[derive(Clone, Debug)]
pub struct LoadedSequence {
    pub meta: Option<SceneMeta>,
    pub frames: Vec<Frame>,
    pub gt: Vec<TrajectoryEntry>,
}

impl LoadedSequence {
    pub fn camera(&self) -> Option<FisheyeCamera> {
        self.meta.as_ref().map(|m| m.scenario.camera)
    }
}

pub fn load_sequence_dir(dir: &Path) -> Result<LoadedSequence, SimError> {
    let meta_path = dir.join("scene_meta.json");
    let meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| SimError::Io(format!("{}: {e}", meta_path.display())))?;
        let meta: SceneMeta = serde_json::from_str(&text).map_err(|e| SimError::Format(format!("scene_meta.json: {e}")))?;
        meta.scenario.camera.validate().map_err(|e| SimError::Format(format!("calibration: {e}")))?;
        Some(meta)
    } else {
        None
    };
    let paths: Vec<PathBuf> = match &meta {
        Some(m) => (0..m.n_frames).map(|k| dir.join("frames").join(format!("{k:06}.feat"))).collect(),
        None => {
            let frames_dir = dir.join("frames");
            let listing = fs::read_dir(&frames_dir).map_err(|e| SimError::Io(format!("{}: {e}", frames_dir.display())))?;
            let mut v = Vec::new();
            for entry in listing {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e == "feat") {
                    v.push(p);
                }
            }
            v.sort();
            v
        }
    };
    let mut frames = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = File::open(p).map_err(|e| SimError::Io(format!("{}: {e}", p.display())))?;
        let rec = read_feature_file(BufReader::new(f)).map_err(|e| SimError::Format(format!("{}: {e}", p.display())))?;
        frames.push(rec.into_frame());
    }
    let gt_path = dir.join("gt_trajectory.txt");
    let gt = if gt_path.exists() {
        read_trajectory_file(&gt_path).map_err(|e| SimError::Format(format!("gt_trajectory.txt: {e}")))?
    } else {
        Vec::new()
    };
    Ok(LoadedSequence { meta, frames, gt })
}
