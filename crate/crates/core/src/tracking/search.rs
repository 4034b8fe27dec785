//! Descriptor matching of projected 3D points against keypoints.

use std::collections::BTreeMap;

use nalgebra::{Vector2, Vector3};

use crate::camera::{FisheyeCamera, SE3Pose};
use crate::map::{Descriptor, KeyPoint, KeypointGrid, Map, MapPointId};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SearchParams {
    /// Window radius at octave 0 (px); grows by half of it per octave.
    pub radius: f64,
    pub min_similarity: f64,
    /// Second-best / best similarity in the window must stay below this.
    pub ratio: f64,
    /// Allowed difference between point and keypoint octave.
    pub octave_tolerance: u8,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self { radius: 15.0, min_similarity: 0.6, ratio: 0.9, octave_tolerance: 1 }
    }
}

impl SearchParams {
    pub fn with_radius(mut self, r: f64) -> Self {
        self.radius = r;
        self
    }

    pub fn window(&self, octave: u8) -> f64 {
        self.radius * (1.0 + 0.5 * octave as f64)
    }
}

/// A 3D point offered for projection.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub id: MapPointId,
    pub position: Vector3<f64>,
    pub descriptor: Descriptor,
    pub octave: u8,
}

impl Candidate {
    pub fn from_map(map: &Map, id: MapPointId) -> Option<Self> {
        let p = map.points.get(&id)?;
        Some(Self { id, position: p.position, descriptor: p.descriptor.clone(), octave: p.ref_octave })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionMatch {
    /// Index into the candidate list.
    pub candidate: usize,
    pub keypoint: usize,
    pub similarity: f64,
}

/// Pixel of `p` (world) under `pose`, if inside the field of view and the image.
pub fn project_visible(camera: &FisheyeCamera, pose: &SE3Pose, p: &Vector3<f64>, margin: f64) -> Option<Vector2<f64>> {
    let pc = pose.transform_point(p);
    let px = camera.project(&pc).ok()?;
    camera.contains_with_margin(&px, margin).then_some(px)
}

/// Matches each candidate to the most similar free keypoint within its
/// window. A keypoint claimed by several candidates goes to the most
/// similar one (lower candidate index on ties). Returns matches sorted by
/// keypoint index, plus the number of candidates that projected inside
/// the image.
pub fn search_by_projection(
    candidates: &[Candidate],
    keypoints: &[KeyPoint],
    grid: &KeypointGrid,
    taken: &[bool],
    pose: &SE3Pose,
    camera: &FisheyeCamera,
    params: &SearchParams,
) -> (Vec<ProjectionMatch>, usize) {
    let mut best_for_kp: BTreeMap<usize, ProjectionMatch> = BTreeMap::new();
    let mut n_visible = 0;
    for (ci, c) in candidates.iter().enumerate() {
        let Some(px) = project_visible(camera, pose, &c.position, 0.0) else {
            continue;
        };
        n_visible += 1;
        let mut best: Option<(usize, f64)> = None;
        let mut second = 0.0f64;
        for k in grid.query(keypoints, &px, params.window(c.octave)) {
            if taken.get(k).copied().unwrap_or(false) {
                continue;
            }
            let kp = &keypoints[k];
            if kp.octave.abs_diff(c.octave) > params.octave_tolerance {
                continue;
            }
            let s = kp.descriptor.dot(&c.descriptor);
            match best {
                Some((_, b)) if s <= b => second = second.max(s),
                Some((_, b)) => {
                    second = b;
                    best = Some((k, s));
                }
                None => best = Some((k, s)),
            }
        }
        let Some((k, s)) = best else { continue };
        if s < params.min_similarity || second >= params.ratio * s {
            continue;
        }
        let m = ProjectionMatch { candidate: ci, keypoint: k, similarity: s };
        match best_for_kp.get(&k) {
            Some(prev) if prev.similarity >= s => {}
            _ => {
                best_for_kp.insert(k, m);
            }
        }
    }
    (best_for_kp.into_values().collect(), n_visible)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::DESCRIPTOR_LEN;

    fn desc(i: usize) -> Descriptor {
        Descriptor::basis(i % DESCRIPTOR_LEN)
    }

    #[test]
    fn exact_projection_matches_and_conflicts_resolve_by_similarity() {
        let cam = FisheyeCamera::equidistant(300.0, 640, 480);
        let pose = SE3Pose::identity();
        let pts: Vec<Vector3<f64>> = (0..20).map(|i| Vector3::new(i as f64 * 0.3 - 3.0, 0.5, 10.0)).collect();
        let kps: Vec<KeyPoint> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| KeyPoint { pixel: cam.project(p).unwrap(), octave: 0, descriptor: desc(i), intensity: 0.5 })
            .collect();
        let grid = KeypointGrid::build(&kps, 640, 480);
        let mut cands: Vec<Candidate> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| Candidate { id: MapPointId(i as u64), position: *p, descriptor: desc(i), octave: 0 })
            .collect();
        let (m, vis) = search_by_projection(&cands, &kps, &grid, &vec![false; 20], &pose, &cam, &SearchParams::default());
        assert_eq!(vis, 20);
        assert_eq!(m.len(), 20);
        assert!(m.iter().all(|x| x.candidate == x.keypoint));
        // a duplicate candidate with a worse descriptor loses the keypoint
        let mut worse = cands[3].clone();
        let mut v = [0.0; DESCRIPTOR_LEN];
        v[3] = 0.8;
        v[50] = 0.6;
        worse.descriptor = Descriptor::new(v).unwrap();
        cands.push(worse);
        let (m, _) = search_by_projection(&cands, &kps, &grid, &vec![false; 20], &pose, &cam, &SearchParams::default());
        assert_eq!(m.iter().find(|x| x.keypoint == 3).unwrap().candidate, 3);
        let rotated = SE3Pose::new(nalgebra::UnitQuaternion::from_euler_angles(0.0, std::f64::consts::PI, 0.0), Vector3::zeros());
        let (m, _) = search_by_projection(&cands, &kps, &grid, &vec![false; 20], &rotated, &cam, &SearchParams::default());
        assert!(m.is_empty());
    }
}
