//! Trajectory alignment, RMS ATE, coverage, per-map statistics and the
//! coverage timeline of a finished run.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Sim3Transform;
use crate::geometry::horn_sim3;
use crate::io::TrajectoryEntry;
use crate::map::{Atlas, MapId};
use crate::pipeline::{RunEvent, RunLog};
use crate::tracking::TrackOutcome;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Pairs `(estimate index, gt index)` whose timestamps differ by at most
/// `tolerance`. Each estimate takes its nearest GT entry.
pub fn associate(est: &[TrajectoryEntry], gt: &[TrajectoryEntry], tolerance: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..gt.len()).collect();
    order.sort_by(|a, b| gt[*a].timestamp.total_cmp(&gt[*b].timestamp));
    let times: Vec<f64> = order.iter().map(|i| gt[*i].timestamp).collect();
    let mut out = Vec::new();
    for (i, e) in est.iter().enumerate() {
        let pos = times.partition_point(|t| *t < e.timestamp);
        let best = [pos.checked_sub(1), Some(pos).filter(|p| *p < times.len())]
            .into_iter()
            .flatten()
            .min_by(|a, b| (times[*a] - e.timestamp).abs().total_cmp(&(times[*b] - e.timestamp).abs()));
        if let Some(j) = best.filter(|j| (times[*j] - e.timestamp).abs() <= tolerance) {
            out.push((i, order[j]));
        }
    }
    out
}

/// Half of the median GT frame period.
pub fn default_tolerance(gt: &[TrajectoryEntry]) -> f64 {
    let mut d: Vec<f64> = gt.windows(2).map(|w| (w[1].timestamp - w[0].timestamp).abs()).filter(|d| *d > 0.0).collect();
    if d.is_empty() {
        return 1e-6;
    }
    d.sort_by(f64::total_cmp);
    0.5 * d[d.len() / 2]
}

/// Similarity taking estimated camera centers onto GT centers.
pub fn align_trajectory_sim3(est: &[TrajectoryEntry], gt: &[TrajectoryEntry], tolerance: f64) -> Result<Sim3Transform, EvalError> {
    let pairs = associate(est, gt, tolerance);
    if pairs.len() < 3 {
        return Err(EvalError::InvalidInput(format!("{} associated poses, 3 required", pairs.len())));
    }
    let a: Vec<Vector3<f64>> = pairs.iter().map(|(i, _)| est[*i].center()).collect();
    let b: Vec<Vector3<f64>> = pairs.iter().map(|(_, j)| gt[*j].center()).collect();
    horn_sim3(&a, &b).map_err(|e| EvalError::InvalidInput(e.to_string()))
}

/// RMS distance between paired centers.
pub fn rms_ate(aligned: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64, EvalError> {
    if aligned.is_empty() || aligned.len() != gt.len() {
        return Err(EvalError::InvalidInput(format!("{} estimated vs {} GT centers", aligned.len(), gt.len())));
    }
    let s: f64 = aligned.iter().zip(gt).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok((s / aligned.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub rms: f64,
    pub n_associated: usize,
    pub scale: f64,
}

/// Aligns and scores one trajectory.
pub fn ate(est: &[TrajectoryEntry], gt: &[TrajectoryEntry], tolerance: f64) -> Result<AteReport, EvalError> {
    let t = align_trajectory_sim3(est, gt, tolerance)?;
    let pairs = associate(est, gt, tolerance);
    let a: Vec<Vector3<f64>> = pairs.iter().map(|(i, _)| t.apply(&est[*i].center())).collect();
    let b: Vec<Vector3<f64>> = pairs.iter().map(|(_, j)| gt[*j].center()).collect();
    Ok(AteReport { rms: rms_ate(&a, &b)?, n_associated: pairs.len(), scale: t.scale })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapAte {
    pub map_id: u32,
    pub rms: f64,
    pub n_associated: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiMapAte {
    /// RMS over every frame of every scored map.
    pub rms: f64,
    pub n_associated: usize,
    pub per_map: Vec<MapAte>,
    /// Maps with fewer than three associated frames, not scored.
    pub unscored_frames: usize,
}

/// Each map has its own gauge, so each is aligned separately.
pub fn multi_map_ate(est: &[TrajectoryEntry], gt: &[TrajectoryEntry], tolerance: f64) -> Result<MultiMapAte, EvalError> {
    let mut groups: BTreeMap<u32, Vec<TrajectoryEntry>> = BTreeMap::new();
    for e in est {
        groups.entry(e.map_id).or_default().push(*e);
    }
    let mut per_map = Vec::new();
    let (mut sq, mut n, mut unscored) = (0.0, 0usize, 0usize);
    for (map_id, entries) in groups {
        match ate(&entries, gt, tolerance) {
            Ok(r) => {
                sq += r.rms * r.rms * r.n_associated as f64;
                n += r.n_associated;
                per_map.push(MapAte { map_id, rms: r.rms, n_associated: r.n_associated });
            }
            Err(_) => unscored += entries.len(),
        }
    }
    if n == 0 {
        return Err(EvalError::InvalidInput("no map could be aligned".into()));
    }
    Ok(MultiMapAte { rms: (sq / n as f64).sqrt(), n_associated: n, per_map, unscored_frames: unscored })
}

/// Percentage of frames localized.
pub fn coverage(log: &RunLog, n_frames: usize) -> Result<f64, EvalError> {
    if n_frames == 0 {
        return Err(EvalError::InvalidInput("no frames".into()));
    }
    Ok(100.0 * log.n_localized() as f64 / n_frames as f64)
}

/// Map each map id ends up in after all merges of the log.
pub fn final_map_ids(log: &RunLog) -> BTreeMap<MapId, MapId> {
    let mut into: BTreeMap<MapId, MapId> = BTreeMap::new();
    for e in &log.events {
        match e {
            RunEvent::MapCreated { map, .. } => {
                into.entry(*map).or_insert(*map);
            }
            RunEvent::Merge { map_a, map_m, .. } => {
                into.insert(*map_a, *map_m);
                into.entry(*map_m).or_insert(*map_m);
            }
            _ => {}
        }
    }
    let keys: Vec<MapId> = into.keys().copied().collect();
    let mut out = BTreeMap::new();
    for k in keys {
        let mut m = k;
        let mut steps = 0;
        while let Some(n) = into.get(&m).filter(|n| **n != m) {
            m = *n;
            steps += 1;
            if steps > into.len() {
                break;
            }
        }
        out.insert(k, m);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub map_id: u32,
    pub start_frame: u64,
    pub end_frame: u64,
}

impl Span {
    pub fn n_frames(&self) -> u64 {
        self.end_frame - self.start_frame + 1
    }
}

/// Runs of consecutive localized frames in the same (final) map.
pub fn coverage_timeline(log: &RunLog) -> Vec<Span> {
    let fin = final_map_ids(log);
    let mut spans: Vec<Span> = Vec::new();
    for r in &log.results {
        let map = r.map_id.filter(|_| r.outcome.is_localized()).map(|m| fin.get(&m).copied().unwrap_or(m));
        match (map, spans.last_mut()) {
            (Some(m), Some(s)) if s.map_id == m.0 && s.end_frame + 1 == r.frame_id => {
                s.end_frame = r.frame_id;
            }
            (Some(m), _) => spans.push(Span { map_id: m.0, start_frame: r.frame_id, end_frame: r.frame_id }),
            (None, _) => {}
        }
    }
    spans
}

pub fn timeline_csv(spans: &[Span]) -> String {
    let mut out = String::from("map_id,start_frame,end_frame\n");
    for s in spans {
        let _ = writeln!(out, "{},{},{}", s.map_id, s.start_frame, s.end_frame);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub map_id: u32,
    pub n_kf: usize,
    pub n_mp: usize,
    /// Keyframes per second of lifetime.
    pub kf_rate: f64,
    /// Seconds between the first and last frame tracked in the map.
    pub lifetime: f64,
    /// Mean tracked map points per frame.
    pub obs_per_frame: f64,
    /// Mean number of frames observing each map point.
    pub obs_per_mp: f64,
    pub n_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub n_maps: usize,
    pub n_maps_created: usize,
    pub n_merges: usize,
    pub n_relocations: usize,
    pub coverage_pct: f64,
    pub lost_pct: f64,
    /// Coverage over the frames from the first initialization onwards.
    pub coverage_after_init_pct: f64,
    pub n_kf: usize,
    pub n_mp: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub global: GlobalStats,
    pub per_map: Vec<MapStats>,
    pub largest_map: Option<MapStats>,
}

impl RunStats {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }
}

/// Per-map and global statistics of a finished run. Frames tracked in maps
/// that were merged away count towards the surviving map.
pub fn map_stats(atlas: &Atlas, log: &RunLog) -> RunStats {
    let fin = final_map_ids(log);
    let mut frames: BTreeMap<MapId, Vec<(f64, usize)>> = BTreeMap::new();
    for r in log.results.iter().filter(|r| r.outcome.is_localized()) {
        if let Some(m) = r.map_id {
            frames.entry(fin.get(&m).copied().unwrap_or(m)).or_default().push((r.timestamp, r.n_matches));
        }
    }
    let per_map: Vec<MapStats> = atlas
        .maps()
        .map(|m| {
            let f = frames.get(&m.id).map(Vec::as_slice).unwrap_or(&[]);
            let lifetime = match (f.first(), f.last()) {
                (Some(a), Some(b)) => (b.0 - a.0).max(0.0),
                _ => 0.0,
            };
            let obs_per_frame = if f.is_empty() { 0.0 } else { f.iter().map(|x| x.1 as f64).sum::<f64>() / f.len() as f64 };
            let obs_per_mp =
                if m.points.is_empty() { 0.0 } else { m.points.values().map(|p| p.frames_observed as f64).sum::<f64>() / m.points.len() as f64 };
            MapStats {
                map_id: m.id.0,
                n_kf: m.n_keyframes(),
                n_mp: m.n_points(),
                kf_rate: if lifetime > 0.0 { m.n_keyframes() as f64 / lifetime } else { 0.0 },
                lifetime,
                obs_per_frame,
                obs_per_mp,
                n_frames: f.len(),
            }
        })
        .collect();
    let n = log.n_frames();
    let cov = if n == 0 { 0.0 } else { 100.0 * log.n_localized() as f64 / n as f64 };
    let global = GlobalStats {
        n_maps: atlas.n_maps(),
        n_maps_created: log.n_maps_created(),
        n_merges: log.n_merges(),
        n_relocations: log.n_relocations(),
        coverage_pct: cov,
        lost_pct: if n == 0 { 0.0 } else { 100.0 * (n - log.n_localized()) as f64 / n as f64 },
        coverage_after_init_pct: coverage_after_init(log),
        n_kf: per_map.iter().map(|m| m.n_kf).sum(),
        n_mp: per_map.iter().map(|m| m.n_mp).sum(),
    };
    let largest_map = per_map.iter().max_by(|a, b| a.n_kf.cmp(&b.n_kf).then(b.map_id.cmp(&a.map_id))).cloned();
    RunStats { global, per_map, largest_map }
}

/// Coverage over the frames from the first `Initialized` outcome onwards;
/// 0 when the run never initialized.
pub fn coverage_after_init(log: &RunLog) -> f64 {
    let Some(first) = log.results.iter().position(|r| r.outcome == TrackOutcome::Initialized) else {
        return 0.0;
    };
    let tail = &log.results[first..];
    100.0 * tail.iter().filter(|r| r.outcome.is_localized()).count() as f64 / tail.len() as f64
}

/// Revisit windows `[start, end + tail)` containing a merge or a relocation.
pub fn revisit_hits(log: &RunLog, windows: &[(u64, u64)], tail: u64) -> usize {
    windows
        .iter()
        .filter(|(s, e)| {
            log.events.iter().any(|ev| {
                matches!(ev, RunEvent::Merge { .. } | RunEvent::Relocation { .. }) && (*s..*e + tail).contains(&ev.frame_id())
            })
        })
        .count()
}
