use std::collections::BTreeMap;

use nalgebra::UnitQuaternion;

use super::local::{keyframe_decision, local_keyframes, predict_pose, track_local_map, track_reference_keyframe, LocalTrack};
use super::{initialize_two_view, TrackOutcome, TrackResult, TrackingMode, TrackingParams, TwoViewInit};
use crate::camera::{FisheyeCamera, PoseRecord, SE3Pose, Sim3Transform};
use crate::geometry::derive_seed;
use crate::map::{Atlas, Frame, KeyFrame, KeyFrameId, KeypointGrid, Map, MapId, MapPoint, MapPointId};
use crate::optim::{full_ba, BaSettings, NoiseModel};
use crate::placerec::{relocalize, KeyFrameDatabase, RelocParams};

/// A frame pose stored relative to a keyframe, so later corrections of the
/// keyframe (and of its map's scale) carry over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameAnchor {
    pub kf: KeyFrameId,
    /// Frame from keyframe.
    pub t_fk: SE3Pose,
    /// Median depth of the keyframe's points when the anchor was taken.
    pub ref_depth: f64,
}

impl FrameAnchor {
    pub fn new(map: &Map, kf: KeyFrameId, pose: &SE3Pose) -> Option<Self> {
        let k = map.keyframes.get(&kf)?;
        let ref_depth = map.median_depth(kf)?;
        Some(Self { kf, t_fk: pose.compose(&k.pose.inverse()), ref_depth })
    }

    /// Frame pose given the keyframe's current pose and point depth.
    pub fn resolve_with(&self, kf_pose: &SE3Pose, depth_now: f64) -> SE3Pose {
        let scale = if self.ref_depth > 0.0 { depth_now / self.ref_depth } else { 1.0 };
        let rel = SE3Pose::new(self.t_fk.rotation, self.t_fk.translation * scale);
        rel.compose(kf_pose)
    }

    pub fn resolve(&self, map: &Map) -> Option<SE3Pose> {
        let k = map.keyframes.get(&self.kf)?;
        let d = map.median_depth(self.kf).unwrap_or(self.ref_depth);
        Some(self.resolve_with(&k.pose, d))
    }

    /// Re-anchors to `parent` after the keyframe was culled.
    pub fn rebase(&self, culled_pose: &SE3Pose, culled_depth: f64, map: &Map, parent: KeyFrameId) -> Option<Self> {
        let pose = self.resolve_with(culled_pose, culled_depth);
        Self::new(map, parent, &pose)
    }
}

#[derive(Clone, Debug)]
pub struct KeyFrameRequest {
    /// Tracked frame: pose and map point matches are set.
    pub frame: Frame,
    pub map: MapId,
    pub reference_kf: KeyFrameId,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrackerEvent {
    Lost { frame_id: u64 },
    MapCreated { map: MapId, keyframes: [KeyFrameId; 2] },
    Relocalized { map: MapId, keyframe: KeyFrameId, n_inliers: usize },
}

#[derive(Clone, Debug)]
pub struct TrackOutput {
    pub result: TrackResult,
    pub keyframe: Option<KeyFrameRequest>,
    pub events: Vec<TrackerEvent>,
    pub anchor: Option<FrameAnchor>,
}

#[derive(Clone, Debug)]
pub struct TrackingState {
    pub mode: TrackingMode,
    /// `T_k · T_{k−1}⁻¹` of the last two consecutive tracked frames.
    pub velocity: Option<SE3Pose>,
    pub last: Option<FrameAnchor>,
    pub last_frame_id: Option<u64>,
    pub last_matches: Vec<MapPointId>,
    pub reference_kf: Option<KeyFrameId>,
    pub frames_since_last_kf: usize,
    /// Map that was active when tracking was last successful.
    pub last_map: Option<MapId>,
    /// `(frame id, new mode)` for every transition.
    pub transitions: Vec<(u64, TrackingMode)>,
    init_ref: Option<Frame>,
}

impl Default for TrackingState {
    fn default() -> Self {
        Self {
            mode: TrackingMode::NotInitialized,
            velocity: None,
            last: None,
            last_frame_id: None,
            last_matches: Vec::new(),
            reference_kf: None,
            frames_since_last_kf: 0,
            last_map: None,
            transitions: Vec::new(),
            init_ref: None,
        }
    }
}

impl TrackingState {
    fn set_mode(&mut self, frame_id: u64, mode: TrackingMode) {
        if self.mode != mode {
            self.mode = mode;
            self.transitions.push((frame_id, mode));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Tracker {
    pub params: TrackingParams,
    pub reloc: RelocParams,
    pub noise: NoiseModel,
    pub camera: FisheyeCamera,
    pub state: TrackingState,
    pub seed: u64,
}

fn lost_result(frame: &Frame) -> TrackResult {
    TrackResult {
        frame_id: frame.frame_id,
        timestamp: frame.timestamp,
        outcome: TrackOutcome::Lost,
        pose: None,
        map_id: None,
        n_matches: 0,
        reference_kf: None,
    }
}

impl Tracker {
    pub fn new(params: TrackingParams, reloc: RelocParams, noise: NoiseModel, camera: FisheyeCamera, seed: u64) -> Self {
        Self { params, reloc, noise, camera, state: TrackingState::default(), seed }
    }

    /// Dispatches on the tracking mode. `queue_len` is the number of
    /// keyframes waiting for the mapper.
    pub fn track_frame(&mut self, frame: &Frame, atlas: &mut Atlas, db: &KeyFrameDatabase, queue_len: usize) -> TrackOutput {
        let mut events = Vec::new();
        let out = match self.state.mode {
            TrackingMode::NotInitialized => self.try_initialize(frame, atlas, &mut events),
            TrackingMode::Ok => match self.track_normal(frame, atlas, queue_len) {
                Some(o) => Some(o),
                None => {
                    self.state.set_mode(frame.frame_id, TrackingMode::Lost);
                    self.state.velocity = None;
                    self.state.init_ref = None;
                    events.push(TrackerEvent::Lost { frame_id: frame.frame_id });
                    self.recover(frame, atlas, db, &mut events)
                }
            },
            TrackingMode::Lost => self.recover(frame, atlas, db, &mut events),
        };
        let mut out = out.unwrap_or_else(|| TrackOutput { result: lost_result(frame), keyframe: None, anchor: None, events: Vec::new() });
        out.events = events;
        if out.result.outcome.is_localized() {
            self.state.last_frame_id = Some(frame.frame_id);
            self.state.last_map = out.result.map_id;
        }
        out
    }

    /// Called once the mapper has inserted the requested keyframe.
    pub fn keyframe_inserted(&mut self, kf: KeyFrameId) {
        self.state.reference_kf = Some(kf);
        self.state.frames_since_last_kf = 0;
    }

    /// Follows a merge of `from` into `into`.
    pub fn map_merged(&mut self, from: MapId, into: MapId) {
        if self.state.last_map == Some(from) {
            self.state.last_map = Some(into);
        }
    }

    /// Keeps the stored anchor valid when its keyframe is culled.
    pub fn keyframe_culled(&mut self, culled: KeyFrameId, pose: &SE3Pose, depth: f64, map: &Map, parent: Option<KeyFrameId>) {
        if let Some(a) = self.state.last.filter(|a| a.kf == culled) {
            self.state.last = parent.and_then(|p| a.rebase(pose, depth, map, p));
        }
        if self.state.reference_kf == Some(culled) {
            self.state.reference_kf = parent;
        }
    }

    fn result(&self, frame: &Frame, outcome: TrackOutcome, pose: &SE3Pose, map: MapId, n: usize) -> TrackResult {
        TrackResult {
            frame_id: frame.frame_id,
            timestamp: frame.timestamp,
            outcome,
            pose: Some(PoseRecord::from(pose)),
            map_id: Some(map),
            n_matches: n,
            reference_kf: self.state.reference_kf,
        }
    }

    fn accept(&mut self, frame: &Frame, map: &mut Map, track: &LocalTrack, velocity_from: Option<SE3Pose>) {
        for m in &track.visible {
            if let Some(p) = map.points.get_mut(m) {
                p.n_visible += 1;
            }
        }
        let mut shared: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
        for m in track.matches.values() {
            if let Some(p) = map.points.get_mut(m) {
                p.n_found += 1;
                p.frames_observed += 1;
                for kf in p.observations.keys() {
                    *shared.entry(*kf).or_default() += 1;
                }
            }
        }
        if let Some(best) = shared.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
            self.state.reference_kf = Some(*best.0);
        }
        let consecutive = self.state.last_frame_id.is_some_and(|l| l + 1 == frame.frame_id);
        self.state.velocity = match velocity_from {
            Some(prev) if consecutive => Some(track.pose.compose(&prev.inverse())),
            _ => None,
        };
        self.state.last_matches = track.matches.values().copied().collect();
        self.state.last = self.state.reference_kf.and_then(|k| FrameAnchor::new(map, k, &track.pose));
    }

    fn track_normal(&mut self, frame: &Frame, atlas: &mut Atlas, queue_len: usize) -> Option<TrackOutput> {
        let map_id = atlas.active_id()?;
        let map = atlas.active_map_mut()?;
        let last_pose = self.state.last.and_then(|a| a.resolve(map));
        let grid = KeypointGrid::build(&frame.keypoints, self.camera.width, self.camera.height);
        let local = local_keyframes(map, self.state.reference_kf, &self.state.last_matches, self.params.local_keyframes);
        let empty = BTreeMap::new();
        let mut track = predict_pose(last_pose.as_ref(), self.state.velocity.as_ref()).and_then(|pred| {
            track_local_map(frame, &grid, &pred, map, &local, &empty, &self.camera, &self.noise, &self.params).ok()
        });
        if track.is_none() {
            let start = last_pose.or_else(|| self.state.reference_kf.and_then(|k| map.keyframes.get(&k)).map(|k| k.pose))?;
            let kf = self.state.reference_kf?;
            if let Ok((pose, preset)) = track_reference_keyframe(frame, kf, map, &start, &self.camera, &self.noise, &self.params) {
                track = track_local_map(frame, &grid, &pose, map, &local, &preset, &self.camera, &self.noise, &self.params).ok();
            }
        }
        let track = track?;
        self.accept(frame, map, &track, last_pose);
        self.state.frames_since_last_kf += 1;
        let n = track.n_inliers();
        let mut out = TrackOutput {
            result: self.result(frame, TrackOutcome::Tracked, &track.pose, map_id, n),
            keyframe: None,
            events: Vec::new(),
            anchor: self.state.last,
        };
        let reference = self.state.reference_kf?;
        let ref_tracked = map.keyframes.get(&reference).map_or(0, |k| k.n_tracked());
        if keyframe_decision(&self.params, n, ref_tracked, self.state.frames_since_last_kf, queue_len) {
            let mut f = frame.clone();
            f.pose = Some(track.pose);
            f.map_point_matches = track.matches.clone();
            out.keyframe = Some(KeyFrameRequest { frame: f, map: map_id, reference_kf: reference });
            self.state.frames_since_last_kf = 0;
        }
        Some(out)
    }

    fn recover(&mut self, frame: &Frame, atlas: &mut Atlas, db: &KeyFrameDatabase, events: &mut Vec<TrackerEvent>) -> Option<TrackOutput> {
        if let Some(last_map) = self.state.last_map.filter(|m| atlas.contains(*m)) {
            let seed = derive_seed(self.seed, frame.frame_id ^ 0x5e10c);
            if let Ok(r) = relocalize(frame, atlas, db, last_map, &self.camera, &self.noise, &self.reloc, &self.params, seed) {
                if atlas.active_id() != Some(r.map) {
                    atlas.set_active(r.map).ok()?;
                }
                let map = atlas.map_mut(r.map).ok()?;
                self.state.reference_kf = Some(r.keyframe);
                self.state.last_frame_id = None;
                let track = LocalTrack { pose: r.pose, matches: r.matches.clone(), visible: r.visible.clone() };
                self.accept(frame, map, &track, None);
                self.state.frames_since_last_kf = 0;
                self.state.set_mode(frame.frame_id, TrackingMode::Ok);
                events.push(TrackerEvent::Relocalized { map: r.map, keyframe: r.keyframe, n_inliers: r.matches.len() });
                return Some(TrackOutput {
                    result: self.result(frame, TrackOutcome::Relocalized, &r.pose, r.map, r.matches.len()),
                    keyframe: None,
                    events: Vec::new(),
                    anchor: self.state.last,
                });
            }
        }
        self.try_initialize(frame, atlas, events)
    }

    fn try_initialize(&mut self, frame: &Frame, atlas: &mut Atlas, events: &mut Vec<TrackerEvent>) -> Option<TrackOutput> {
        if frame.keypoints.len() < self.params.theta_init {
            self.state.init_ref = None;
            return None;
        }
        let reference = match self.state.init_ref.take() {
            Some(r) if frame.frame_id.saturating_sub(r.frame_id) <= self.params.init_max_gap => r,
            _ => {
                self.state.init_ref = Some(frame.clone());
                return None;
            }
        };
        let seed = derive_seed(self.seed, frame.frame_id);
        let init = match initialize_two_view(&reference, frame, &self.camera, &self.noise, &self.params, seed) {
            Ok(i) => i,
            Err(super::InitRejection::TooFewMatches { .. }) => {
                self.state.init_ref = Some(frame.clone());
                return None;
            }
            Err(_) => {
                self.state.init_ref = Some(reference);
                return None;
            }
        };
        let Some((map_id, kfs, pose, n)) = self.build_initial_map(&reference, frame, &init, atlas) else {
            self.state.init_ref = Some(reference);
            return None;
        };
        let map = atlas.map(map_id).ok()?;
        self.state.reference_kf = Some(kfs[1]);
        self.state.last = FrameAnchor::new(map, kfs[1], &pose);
        self.state.last_matches = map.keyframes[&kfs[1]].map_points().map(|(_, m)| m).collect();
        self.state.velocity = None;
        self.state.frames_since_last_kf = 0;
        self.state.last_frame_id = None;
        if self.state.mode == TrackingMode::Lost {
            self.state.set_mode(frame.frame_id, TrackingMode::NotInitialized);
        }
        self.state.set_mode(frame.frame_id, TrackingMode::Ok);
        events.push(TrackerEvent::MapCreated { map: map_id, keyframes: kfs });
        Some(TrackOutput {
            result: self.result(frame, TrackOutcome::Initialized, &pose, map_id, n),
            keyframe: None,
            events: Vec::new(),
            anchor: self.state.last,
        })
    }

    /// Builds the two-keyframe map, bundle-adjusts it and normalizes the
    /// baseline to 1. Nothing is added to the atlas on failure.
    fn build_initial_map(
        &self,
        reference: &Frame,
        frame: &Frame,
        init: &TwoViewInit,
        atlas: &mut Atlas,
    ) -> Option<(MapId, [KeyFrameId; 2], SE3Pose, usize)> {
        let placeholder = MapId(u32::MAX);
        let mut map = Map::new(placeholder, reference.timestamp, atlas.covis_threshold());
        let (k0, k1) = (atlas.next_keyframe_id(), atlas.next_keyframe_id());
        let kf0 = KeyFrame::from_frame(k0, reference, SE3Pose::identity(), placeholder, &self.camera);
        let mut kf1 = KeyFrame::from_frame(k1, frame, init.pose_cur, placeholder, &self.camera);
        kf1.parent = Some(k0);
        map.add_keyframe(kf0).ok()?;
        map.add_keyframe(kf1).ok()?;
        for (i, j, p) in &init.points {
            let kp = &frame.keypoints[*j];
            let id = atlas.next_map_point_id();
            let mp = MapPoint {
                id,
                position: *p,
                descriptor: kp.descriptor.clone(),
                observations: BTreeMap::from([(k0, *i), (k1, *j)]),
                map_id: placeholder,
                first_kf: k0,
                created_at_kf_count: 2,
                ref_octave: kp.octave,
                n_visible: 1,
                n_found: 1,
                frames_observed: 2,
            };
            map.add_map_point(mp).ok()?;
            map.refresh_descriptor(id).ok()?;
        }
        map.rebuild_covisibility();
        full_ba(&mut map, &self.noise, &self.camera, &BaSettings { max_iterations: 20, ..Default::default() }).ok()?;
        let n = map.keyframes[&k1].n_tracked();
        if n < self.params.theta_init / 2 {
            return None;
        }
        let baseline = (map.keyframes[&k1].center() - map.keyframes[&k0].center()).norm();
        if !(baseline > 1e-9) {
            return None;
        }
        map.transform(&Sim3Transform::new(1.0 / baseline, UnitQuaternion::identity(), nalgebra::Vector3::zeros()));
        let id = atlas.create_map(reference.timestamp);
        map.id = id;
        for kf in map.keyframes.values_mut() {
            kf.map_id = id;
        }
        for p in map.points.values_mut() {
            p.map_id = id;
        }
        map.updated_at = frame.timestamp;
        let pose = map.keyframes[&k1].pose;
        *atlas.map_mut(id).ok()? = map;
        Some((id, [k0, k1], pose, n))
    }
}
