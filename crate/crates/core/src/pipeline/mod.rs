//! Frame-by-frame driver tying tracking, mapping and place recognition
//! together, sequentially or with a mapping worker thread.

mod config;
mod log;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use thiserror::Error;

pub use config::{MaskParams, PipelineConfig};
pub use log::{RunEvent, RunLog};

use crate::camera::FisheyeCamera;
use crate::features::sparse_keypoint_mask;
use crate::io::TrajectoryEntry;
use crate::map::{Atlas, Frame, KeyFrameId, MapError, MapId};
use crate::mapping::{create_map_points, cull_keyframes, cull_map_points, fuse, insert_keyframe, CulledKeyFrame, LocalMapper};
use crate::optim::local_ba;
use crate::placerec::{detect_merge, merge_maps, KeyFrameDatabase, PlaceRecError, Vocabulary};
use crate::tracking::{FrameAnchor, KeyFrameRequest, TrackerEvent, Tracker};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl From<MapError> for PipelineError {
    fn from(e: MapError) -> Self {
        PipelineError::Invariant(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Sequential,
    Concurrent,
}

impl std::str::FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sequential" => Ok(RunMode::Sequential),
            "concurrent" => Ok(RunMode::Concurrent),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

/// Everything a finished run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub log: RunLog,
    pub atlas: Atlas,
    /// Localized frames with their final poses, in frame order.
    pub trajectory: Vec<TrajectoryEntry>,
}

#[derive(Clone, Copy, Debug)]
struct AnchorSlot {
    timestamp: f64,
    anchor: Option<FrameAnchor>,
}

/// State shared by tracking and mapping.
#[derive(Debug)]
pub struct PipelineCore {
    pub config: PipelineConfig,
    pub camera: FisheyeCamera,
    pub atlas: Atlas,
    pub db: KeyFrameDatabase,
    pub tracker: Tracker,
    pub mapper: LocalMapper,
    pub log: RunLog,
    anchors: Vec<AnchorSlot>,
    by_kf: BTreeMap<KeyFrameId, Vec<usize>>,
}

impl PipelineCore {
    pub fn new(config: PipelineConfig, camera: FisheyeCamera, vocabulary: Arc<Vocabulary>) -> Self {
        let tracker = Tracker::new(config.tracking, config.reloc, config.noise, camera, config.seed);
        Self {
            atlas: Atlas::new(config.covis_threshold),
            db: KeyFrameDatabase::new(vocabulary, config.retrieval),
            tracker,
            mapper: LocalMapper::new(config.mapping),
            log: RunLog::default(),
            anchors: Vec::new(),
            by_kf: BTreeMap::new(),
            camera,
            config,
        }
    }

    /// Drops keypoints on reflections and near the image border.
    pub fn prepare_frame(config: &PipelineConfig, camera: &FisheyeCamera, mut frame: Frame) -> Result<Frame, PipelineError> {
        if !config.masks.enabled || frame.keypoints.is_empty() {
            return Ok(frame);
        }
        let m = &config.masks;
        let keep = sparse_keypoint_mask(&frame.keypoints, camera.width, camera.height, m.intensity_threshold, m.border_margin, m.dilation_base);
        frame.retain_keypoints(&keep);
        Ok(frame)
    }

    fn set_anchor(&mut self, slot: usize, anchor: Option<FrameAnchor>) {
        self.anchors[slot].anchor = anchor;
        if let Some(a) = anchor {
            self.by_kf.entry(a.kf).or_default().push(slot);
        }
    }

    /// Tracks one frame and logs the outcome. Returns the keyframe request, if any.
    pub fn track(&mut self, frame: &Frame, queue_len: usize) -> Option<KeyFrameRequest> {
        let out = self.tracker.track_frame(frame, &mut self.atlas, &self.db, queue_len);
        for e in &out.events {
            let (frame_id, timestamp) = (frame.frame_id, frame.timestamp);
            self.log.events.push(match *e {
                TrackerEvent::Lost { .. } => RunEvent::Loss { frame_id, timestamp },
                TrackerEvent::MapCreated { map, keyframes } => {
                    self.mapper.reset();
                    if let Ok(m) = self.atlas.map(map) {
                        for k in keyframes {
                            let descs: Vec<_> = m.keyframes[&k].keypoints.iter().map(|kp| kp.descriptor.clone()).collect();
                            self.db.add(k, map, &descs);
                        }
                    }
                    RunEvent::MapCreated { frame_id, timestamp, map, keyframes }
                }
                TrackerEvent::Relocalized { map, keyframe, n_inliers } => RunEvent::Relocation { frame_id, timestamp, map, keyframe, n_inliers },
            });
        }
        self.log.results.push(out.result.clone());
        self.anchors.push(AnchorSlot { timestamp: frame.timestamp, anchor: None });
        let slot = self.anchors.len() - 1;
        self.set_anchor(slot, out.anchor.filter(|_| out.result.outcome.is_localized()));
        out.keyframe
    }

    /// Inserts the keyframe and grows the map around it. Requests made
    /// against a map that is no longer active are dropped.
    pub fn insert(&mut self, mut req: KeyFrameRequest) -> Result<Option<KeyFrameId>, PipelineError> {
        if self.atlas.active_id() != Some(req.map) {
            return Ok(None);
        }
        let (map, mut ids) = self.atlas.map_and_ids(req.map)?;
        req.frame.map_point_matches.retain(|_, m| map.points.contains_key(m));
        let id = ids.keyframe();
        let reference = Some(req.reference_kf).filter(|r| map.keyframes.contains_key(r));
        insert_keyframe(map, id, &req.frame, reference, &self.camera, Some(&mut self.db))?;
        cull_map_points(map, &mut self.mapper.recent, &self.mapper.params);
        let new = create_map_points(map, id, &mut ids, &self.camera, &self.config.noise, &self.mapper.params)?;
        self.mapper.recent.extend(new);
        self.tracker.keyframe_inserted(id);
        Ok(Some(id))
    }

    pub fn fuse(&mut self, kf: KeyFrameId) -> Result<(), PipelineError> {
        let Some(map) = active_with(&mut self.atlas, kf) else { return Ok(()) };
        fuse(map, kf, &self.camera, &self.config.noise, &self.mapper.params)?;
        Ok(())
    }

    pub fn bundle_adjust(&mut self, kf: KeyFrameId, abort: Option<&AtomicBool>) -> Result<(), PipelineError> {
        let Some(map) = active_with(&mut self.atlas, kf) else { return Ok(()) };
        if map.n_keyframes() > 2 {
            local_ba(map, kf, &self.config.noise, &self.camera, abort, &self.mapper.params.local_ba)?;
        }
        Ok(())
    }

    pub fn cull(&mut self, kf: KeyFrameId) -> Result<(), PipelineError> {
        let protected: BTreeSet<KeyFrameId> = self.tracker.state.reference_kf.into_iter().collect();
        let Some(map_id) = self.atlas.active_id() else { return Ok(()) };
        let map = self.atlas.map_mut(map_id)?;
        if !map.keyframes.contains_key(&kf) {
            return Ok(());
        }
        let culled = cull_keyframes(map, kf, &protected, &self.mapper.params, Some(&mut self.db))?;
        for c in culled {
            self.rebase(map_id, &c)?;
        }
        Ok(())
    }

    fn rebase(&mut self, map_id: MapId, c: &CulledKeyFrame) -> Result<(), PipelineError> {
        let map = self.atlas.map(map_id)?;
        self.tracker.keyframe_culled(c.id, &c.pose, c.depth, map, c.parent);
        let moved: Vec<(usize, Option<FrameAnchor>)> = self
            .by_kf
            .remove(&c.id)
            .unwrap_or_default()
            .into_iter()
            .map(|slot| (slot, self.anchors[slot].anchor.and_then(|a| c.parent.and_then(|p| a.rebase(&c.pose, c.depth, map, p)))))
            .collect();
        for (slot, a) in moved {
            self.set_anchor(slot, a);
        }
        Ok(())
    }

    /// Looks for a merge with another map and performs it.
    pub fn place_recognition(&mut self, kf: KeyFrameId) -> Result<(), PipelineError> {
        if !self.config.merging || self.atlas.n_maps() < 2 || active_with(&mut self.atlas, kf).is_none() {
            return Ok(());
        }
        let seed = crate::geometry::derive_seed(self.config.seed, kf.0 ^ 0x3e3e);
        let Some(cand) = detect_merge(kf, &self.atlas, &self.db, &self.camera, &self.config.noise, &self.config.placerec, seed) else {
            return Ok(());
        };
        let (gt_agree, gt_labelled) = cand.gt_agreement(&self.atlas);
        let (frame_id, timestamp) = {
            let k = &self.atlas.map(cand.map_a)?.keyframes[&cand.ka];
            (k.frame_id, k.timestamp)
        };
        match merge_maps(&mut self.atlas, &mut self.db, &cand, &self.camera, &self.config.noise, &self.mapper.params.local_ba, self.config.theta_essential) {
            Ok(r) => {
                self.tracker.map_merged(cand.map_a, cand.map_m);
                self.mapper.reset();
                self.log.events.push(RunEvent::Merge {
                    frame_id,
                    timestamp,
                    ka: cand.ka,
                    km: cand.km,
                    map_a: cand.map_a,
                    map_m: cand.map_m,
                    n_pairs: cand.pairs.len(),
                    n_fused: r.n_fused,
                    gt_agree,
                    gt_labelled,
                });
                Ok(())
            }
            Err(PlaceRecError::Stale(_)) => Ok(()),
            Err(e) => Err(PipelineError::Invariant(format!("merge failed: {e}"))),
        }
    }


    /// One full mapping cycle.
    pub fn map_keyframe(&mut self, req: KeyFrameRequest, abort: Option<&AtomicBool>) -> Result<(), PipelineError> {
        let Some(kf) = self.insert(req)? else { return Ok(()) };
        self.fuse(kf)?;
        self.bundle_adjust(kf, abort)?;
        self.cull(kf)?;
        self.place_recognition(kf)
    }

    /// Checks the atlas and database and resolves the final trajectory.
    pub fn finish(self) -> Result<RunOutput, PipelineError> {
        self.atlas.check_invariants()?;
        for m in self.atlas.maps() {
            m.check_integrity()?;
        }
        if self.atlas.n_maps() > 0 && self.atlas.active_id().is_none() {
            return Err(PipelineError::Invariant("no active map".into()));
        }
        let known: BTreeMap<KeyFrameId, MapId> =
            self.atlas.maps().flat_map(|m| m.keyframes.keys().map(move |k| (*k, m.id))).collect();
        self.db.check_against(&known).map_err(PipelineError::Invariant)?;
        self.log.check_consistency().map_err(PipelineError::Invariant)?;
        let mut trajectory = Vec::new();
        for slot in &self.anchors {
            let Some(a) = slot.anchor else { continue };
            let Some(map) = self.atlas.map_of_keyframe(a.kf).and_then(|m| self.atlas.map(m).ok()) else { continue };
            if let Some(pose) = a.resolve(map) {
                trajectory.push(TrajectoryEntry { timestamp: slot.timestamp, pose_wc: pose.inverse(), map_id: map.id.0 });
            }
        }
        Ok(RunOutput { log: self.log, atlas: self.atlas, trajectory })
    }
}

fn active_with(atlas: &mut Atlas, kf: KeyFrameId) -> Option<&mut crate::map::Map> {
    atlas.active_map_mut().filter(|m| m.keyframes.contains_key(&kf))
}

/// Resolves the camera and vocabulary and builds the shared state.
pub fn build_core(config: PipelineConfig, sequence_camera: Option<FisheyeCamera>, vocabulary: Option<Arc<Vocabulary>>) -> Result<PipelineCore, PipelineError> {
    let camera = config
        .camera
        .or(sequence_camera)
        .ok_or_else(|| PipelineError::InvalidInput("missing camera calibration".into()))?;
    let vocabulary = match (vocabulary, &config.vocabulary) {
        (Some(v), _) => v,
        (None, Some(p)) => Arc::new(Vocabulary::load(p).map_err(|e| PipelineError::InvalidInput(format!("vocabulary: {e}")))?),
        (None, None) => crate::placerec::default_vocabulary(),
    };
    Ok(PipelineCore::new(config, camera, vocabulary))
}

/// Tracking and mapping alternate per frame; fully deterministic.
pub fn run_sequential(mut core: PipelineCore, frames: impl IntoIterator<Item = Frame>) -> Result<RunOutput, PipelineError> {
    for frame in frames {
        let frame = PipelineCore::prepare_frame(&core.config, &core.camera, frame)?;
        if let Some(req) = core.track(&frame, 0) {
            core.map_keyframe(req, None)?;
        }
    }
    core.finish()
}

/// Tracking on the calling thread, mapping and place recognition on a
/// worker fed by a keyframe queue. The map is locked per mapping stage;
/// a newly queued keyframe aborts a running local BA.
pub fn run_concurrent(core: PipelineCore, frames: impl IntoIterator<Item = Frame>) -> Result<RunOutput, PipelineError> {
    let shared = Arc::new(Mutex::new(core));
    let queue = Arc::new(AtomicUsize::new(0));
    let abort = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<KeyFrameRequest>();
    let worker = {
        let (shared, queue, abort) = (shared.clone(), queue.clone(), abort.clone());
        std::thread::spawn(move || -> Result<(), PipelineError> {
            let lock = || shared.lock().map_err(|_| PipelineError::Invariant("pipeline lock poisoned".into()));
            for req in rx {
                queue.fetch_sub(1, Ordering::SeqCst);
                abort.store(false, Ordering::SeqCst);
                let Some(kf) = lock()?.insert(req)? else { continue };
                lock()?.fuse(kf)?;
                lock()?.bundle_adjust(kf, Some(&abort))?;
                lock()?.cull(kf)?;
                lock()?.place_recognition(kf)?;
            }
            Ok(())
        })
    };
    let (camera, config) = {
        let c = shared.lock().map_err(|_| PipelineError::Invariant("pipeline lock poisoned".into()))?;
        (c.camera, c.config.clone())
    };
    let mut failure = None;
    for frame in frames {
        let frame = PipelineCore::prepare_frame(&config, &camera, frame)?;
        let req = match shared.lock() {
            Ok(mut c) => c.track(&frame, queue.load(Ordering::SeqCst)),
            Err(_) => {
                failure = Some(PipelineError::Invariant("pipeline lock poisoned".into()));
                break;
            }
        };
        if let Some(r) = req {
            queue.fetch_add(1, Ordering::SeqCst);
            abort.store(true, Ordering::SeqCst);
            if tx.send(r).is_err() {
                break;
            }
        }
    }
    drop(tx);
    let worked = worker.join().map_err(|_| PipelineError::Invariant("mapping worker panicked".into()))?;
    if let Some(f) = failure {
        return Err(f);
    }
    worked?;
    let core = Arc::try_unwrap(shared)
        .map_err(|_| PipelineError::Invariant("pipeline state still shared".into()))?
        .into_inner()
        .map_err(|_| PipelineError::Invariant("pipeline lock poisoned".into()))?;
    core.finish()
}

pub fn run(core: PipelineCore, frames: impl IntoIterator<Item = Frame>, mode: RunMode) -> Result<RunOutput, PipelineError> {
    match mode {
        RunMode::Sequential => run_sequential(core, frames),
        RunMode::Concurrent => run_concurrent(core, frames),
    }
}
