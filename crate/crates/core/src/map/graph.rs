use std::collections::{BTreeMap, BTreeSet};

use super::{Descriptor, KeyFrame, KeyFrameId, MapError, MapId, MapPoint, MapPointId};
use crate::camera::Sim3Transform;

/// Shared observations needed for a covisibility edge.
pub const DEFAULT_COVIS_THRESHOLD: u32 = 15;

/// A map point needs this many keyframe observations to stay alive.
pub const MIN_POINT_OBSERVATIONS: usize = 2;

/// One connected reconstruction: keyframes, map points and their
/// covisibility graph, all in a single gauge.
#[derive(Clone, Debug)]
pub struct Map {
    pub id: MapId,
    pub keyframes: BTreeMap<KeyFrameId, KeyFrame>,
    pub points: BTreeMap<MapPointId, MapPoint>,
    /// Shared point counts for every keyframe pair; edges are the counts at or above the threshold.
    covisibility: BTreeMap<KeyFrameId, BTreeMap<KeyFrameId, u32>>,
    pub covis_threshold: u32,
    pub created_at: f64,
    pub updated_at: f64,
    /// First keyframe of the map; pins the gauge in bundle adjustment.
    pub origin: Option<KeyFrameId>,
    /// Keyframes ever inserted (not decremented by culling).
    pub kf_insert_count: u64,
}

impl Map {
    pub fn new(id: MapId, created_at: f64, covis_threshold: u32) -> Self {
        Self {
            id,
            keyframes: BTreeMap::new(),
            points: BTreeMap::new(),
            covisibility: BTreeMap::new(),
            covis_threshold,
            created_at,
            updated_at: created_at,
            origin: None,
            kf_insert_count: 0,
        }
    }

    pub fn n_keyframes(&self) -> usize {
        self.keyframes.len()
    }

    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn keyframe(&self, id: KeyFrameId) -> Result<&KeyFrame, MapError> {
        self.keyframes.get(&id).ok_or(MapError::KeyFrameNotFound(id))
    }

    pub fn keyframe_mut(&mut self, id: KeyFrameId) -> Result<&mut KeyFrame, MapError> {
        self.keyframes
            .get_mut(&id)
            .ok_or(MapError::KeyFrameNotFound(id))
    }

    pub fn point(&self, id: MapPointId) -> Result<&MapPoint, MapError> {
        self.points.get(&id).ok_or(MapError::PointNotFound(id))
    }

    /// Adds a keyframe. Any filled observation slot must reference an existing
    /// point; the back-references are registered here.
    pub fn add_keyframe(&mut self, mut kf: KeyFrame) -> Result<(), MapError> {
        if self.keyframes.contains_key(&kf.id) {
            return Err(MapError::DuplicateKeyFrame(kf.id));
        }
        for (_, mp) in kf.map_points() {
            if !self.points.contains_key(&mp) {
                return Err(MapError::InvalidInput(format!(
                    "{} observes missing {mp}",
                    kf.id
                )));
            }
        }
        // A point may be claimed by two keypoints of the same frame; keep the first.
        let mut seen = BTreeSet::new();
        for slot in kf.observations.iter_mut() {
            if let Some(mp) = *slot {
                if !seen.insert(mp) {
                    *slot = None;
                }
            }
        }
        kf.map_id = self.id;
        self.covisibility.entry(kf.id).or_default();
        for (idx, mp) in kf.map_points() {
            let others: Vec<KeyFrameId> = self.points[&mp].observations.keys().copied().collect();
            for o in others {
                self.bump(kf.id, o, 1);
            }
            self.points.get_mut(&mp).unwrap().observations.insert(kf.id, idx);
        }
        if self.origin.is_none() {
            self.origin = Some(kf.id);
        }
        self.updated_at = self.updated_at.max(kf.timestamp);
        self.kf_insert_count += 1;
        self.keyframes.insert(kf.id, kf);
        Ok(())
    }

    /// Adds a point together with the observations it lists.
    pub fn add_map_point(&mut self, mut mp: MapPoint) -> Result<(), MapError> {
        if mp.observations.is_empty() {
            return Err(MapError::InvalidState(format!("{} has no observations", mp.id)));
        }
        for (&kf, &idx) in &mp.observations {
            let k = self.keyframe(kf)?;
            match k.observations.get(idx) {
                None => {
                    return Err(MapError::InvalidInput(format!("{kf} has no keypoint {idx}")))
                }
                Some(Some(other)) if *other != mp.id => {
                    return Err(MapError::InvalidInput(format!(
                        "{kf} keypoint {idx} already observes {other}"
                    )))
                }
                _ => {}
            }
        }
        mp.map_id = self.id;
        for (&kf, &idx) in &mp.observations {
            self.keyframes.get_mut(&kf).unwrap().observations[idx] = Some(mp.id);
        }
        self.link_observers(&mp.observations.keys().copied().collect::<Vec<_>>(), 1);
        self.points.insert(mp.id, mp);
        Ok(())
    }

    pub fn add_observation(
        &mut self,
        mp: MapPointId,
        kf: KeyFrameId,
        idx: usize,
    ) -> Result<(), MapError> {
        let slot = self
            .keyframe(kf)?
            .observations
            .get(idx)
            .copied()
            .ok_or_else(|| MapError::InvalidInput(format!("{kf} has no keypoint {idx}")))?;
        if let Some(other) = slot {
            return Err(MapError::InvalidInput(format!(
                "{kf} keypoint {idx} already observes {other}"
            )));
        }
        let point = self.points.get_mut(&mp).ok_or(MapError::PointNotFound(mp))?;
        if point.observations.contains_key(&kf) {
            return Err(MapError::InvalidInput(format!("{mp} already observed by {kf}")));
        }
        let others: Vec<KeyFrameId> = point.observations.keys().copied().collect();
        point.observations.insert(kf, idx);
        for o in others {
            self.bump(kf, o, 1);
        }
        self.keyframes.get_mut(&kf).unwrap().observations[idx] = Some(mp);
        Ok(())
    }

    /// Removes one observation. Returns `true` when the point fell below
    /// [`MIN_POINT_OBSERVATIONS`] and was erased.
    pub fn erase_observation(&mut self, mp: MapPointId, kf: KeyFrameId) -> bool {
        let Some(point) = self.points.get_mut(&mp) else {
            return false;
        };
        if let Some(idx) = point.observations.remove(&kf) {
            let others: Vec<KeyFrameId> = point.observations.keys().copied().collect();
            if let Some(k) = self.keyframes.get_mut(&kf) {
                if k.observations[idx] == Some(mp) {
                    k.observations[idx] = None;
                }
            }
            for o in others {
                self.bump(kf, o, -1);
            }
        }
        if self.points[&mp].observations.len() < MIN_POINT_OBSERVATIONS {
            self.erase_map_point(mp);
            true
        } else {
            false
        }
    }

    pub fn erase_map_point(&mut self, mp: MapPointId) -> Option<MapPoint> {
        let point = self.points.remove(&mp)?;
        self.link_observers(&point.observations.keys().copied().collect::<Vec<_>>(), -1);
        for (&kf, &idx) in &point.observations {
            if let Some(k) = self.keyframes.get_mut(&kf) {
                if k.observations[idx] == Some(mp) {
                    k.observations[idx] = None;
                }
            }
        }
        Some(point)
    }

    /// Removes a keyframe, its observations and its edges. Children in the
    /// spanning tree are re-parented to the removed keyframe's parent.
    pub fn erase_keyframe(&mut self, id: KeyFrameId) -> Result<KeyFrame, MapError> {
        let kf = self.keyframes.remove(&id).ok_or(MapError::KeyFrameNotFound(id))?;
        for (_, mp) in kf.map_points() {
            let Some(point) = self.points.get_mut(&mp) else {
                continue;
            };
            point.observations.remove(&id);
            if point.observations.len() < MIN_POINT_OBSERVATIONS {
                self.erase_map_point(mp);
            }
        }
        if let Some(edges) = self.covisibility.remove(&id) {
            for other in edges.keys() {
                if let Some(e) = self.covisibility.get_mut(other) {
                    e.remove(&id);
                }
            }
        }
        let new_parent = kf.parent.filter(|p| self.keyframes.contains_key(p));
        for other in self.keyframes.values_mut() {
            if other.parent == Some(id) {
                other.parent = new_parent;
            }
        }
        if self.origin == Some(id) {
            self.origin = self.keyframes.keys().next().copied();
        }
        Ok(kf)
    }

    /// Moves every observation of `old` onto `keep` and erases `old`. Keyframes
    /// that already observe `keep` simply drop their `old` observation.
    pub fn replace_map_point(&mut self, old: MapPointId, keep: MapPointId) -> Result<(), MapError> {
        if old == keep {
            return Ok(());
        }
        if !self.points.contains_key(&keep) {
            return Err(MapError::PointNotFound(keep));
        }
        let old_point = self.points.remove(&old).ok_or(MapError::PointNotFound(old))?;
        self.link_observers(&old_point.observations.keys().copied().collect::<Vec<_>>(), -1);
        let kept: Vec<KeyFrameId> = self.points[&keep].observations.keys().copied().collect();
        self.link_observers(&kept, -1);
        for (&kf, &idx) in &old_point.observations {
            let k = self.keyframes.get_mut(&kf).unwrap();
            k.observations[idx] = None;
            let target = self.points.get_mut(&keep).unwrap();
            if let std::collections::btree_map::Entry::Vacant(e) = target.observations.entry(kf) {
                e.insert(idx);
                k.observations[idx] = Some(keep);
            }
        }
        let kept: Vec<KeyFrameId> = self.points[&keep].observations.keys().copied().collect();
        self.link_observers(&kept, 1);
        let target = self.points.get_mut(&keep).unwrap();
        target.n_visible += old_point.n_visible;
        target.n_found += old_point.n_found;
        target.frames_observed += old_point.frames_observed;
        Ok(())
    }

    /// Number of points observed by both keyframes (brute force).
    pub fn shared_points(&self, a: KeyFrameId, b: KeyFrameId) -> u32 {
        let (Some(ka), Some(kb)) = (self.keyframes.get(&a), self.keyframes.get(&b)) else {
            return 0;
        };
        let sa: BTreeSet<MapPointId> = ka.map_points().map(|(_, m)| m).collect();
        kb.map_points().filter(|(_, m)| sa.contains(m)).count() as u32
    }

    fn bump(&mut self, a: KeyFrameId, b: KeyFrameId, delta: i32) {
        if a == b {
            return;
        }
        for (x, y) in [(a, b), (b, a)] {
            let e = self.covisibility.entry(x).or_default();
            let c = e.entry(y).or_default();
            *c = c.checked_add_signed(delta).expect("shared count underflow");
            if *c == 0 {
                e.remove(&y);
            }
        }
    }

    fn link_observers(&mut self, observers: &[KeyFrameId], delta: i32) {
        for (i, &a) in observers.iter().enumerate() {
            for &b in &observers[i + 1..] {
                self.bump(a, b, delta);
            }
        }
    }

    /// Edges of `kf`: every keyframe sharing at least `covis_threshold`
    /// points, with the exact count. Shared counts are maintained on every
    /// observation change, so this is a lookup.
    pub fn update_covisibility(
        &mut self,
        kf: KeyFrameId,
    ) -> Result<Vec<(KeyFrameId, u32)>, MapError> {
        self.keyframe(kf)?;
        Ok(self.neighbors(kf))
    }

    /// Recounts shared points from scratch.
    pub fn rebuild_covisibility(&mut self) {
        self.covisibility.clear();
        for id in self.keyframes.keys() {
            self.covisibility.entry(*id).or_default();
        }
        let groups: Vec<Vec<KeyFrameId>> = self.points.values().map(|p| p.observations.keys().copied().collect()).collect();
        for g in groups {
            self.link_observers(&g, 1);
        }
    }

    pub fn covisibility_weight(&self, a: KeyFrameId, b: KeyFrameId) -> u32 {
        self.covisibility
            .get(&a)
            .and_then(|e| e.get(&b))
            .copied()
            .filter(|w| *w >= self.covis_threshold)
            .unwrap_or(0)
    }

    pub fn neighbors(&self, kf: KeyFrameId) -> Vec<(KeyFrameId, u32)> {
        self.covisibility
            .get(&kf)
            .map(|e| e.iter().filter(|(_, w)| **w >= self.covis_threshold).map(|(&k, &w)| (k, w)).collect())
            .unwrap_or_default()
    }

    /// Up to `n` neighbors by decreasing weight, ties broken by lower id.
    pub fn best_covisible(&self, kf: KeyFrameId, n: usize) -> Result<Vec<KeyFrameId>, MapError> {
        if !self.keyframes.contains_key(&kf) {
            return Err(MapError::KeyFrameNotFound(kf));
        }
        let mut nb = self.neighbors(kf);
        nb.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(nb.into_iter().take(n).map(|(k, _)| k).collect())
    }

    pub fn covisibility_edges(&self) -> Vec<(KeyFrameId, KeyFrameId, u32)> {
        let mut out = Vec::new();
        for (&a, edges) in &self.covisibility {
            for (&b, &w) in edges {
                if a < b && w >= self.covis_threshold {
                    out.push((a, b, w));
                }
            }
        }
        out
    }

    /// Medoid of the point's observed descriptors under dot-product similarity.
    pub fn representative_descriptor(&self, mp: MapPointId) -> Result<Descriptor, MapError> {
        let point = self.point(mp)?;
        let descs: Vec<&Descriptor> = point
            .observations
            .iter()
            .filter_map(|(kf, &idx)| {
                self.keyframes
                    .get(kf)
                    .and_then(|k| k.keypoints.get(idx))
                    .map(|kp| &kp.descriptor)
            })
            .collect();
        medoid(&descs)
            .cloned()
            .ok_or_else(|| MapError::InvalidState(format!("{mp} has no observations")))
    }

    pub fn refresh_descriptor(&mut self, mp: MapPointId) -> Result<(), MapError> {
        let d = self.representative_descriptor(mp)?;
        self.points.get_mut(&mp).unwrap().descriptor = d;
        Ok(())
    }

    /// Median camera-frame depth of the points a keyframe observes.
    pub fn median_depth(&self, kf: KeyFrameId) -> Option<f64> {
        let k = self.keyframes.get(&kf)?;
        let mut z: Vec<f64> = k
            .map_points()
            .filter_map(|(_, m)| self.points.get(&m))
            .map(|p| k.pose.transform_point(&p.position).norm())
            .filter(|d| d.is_finite() && *d > 0.0)
            .collect();
        if z.is_empty() {
            return None;
        }
        let mid = z.len() / 2;
        z.select_nth_unstable_by(mid, f64::total_cmp);
        Some(z[mid])
    }

    /// Moves every keyframe and point of `other` into this map. Ids are
    /// atlas-wide so they cannot collide; covisibility is rebuilt.
    pub fn absorb(&mut self, other: Map) -> Result<(), MapError> {
        if let Some(k) = other.keyframes.keys().find(|k| self.keyframes.contains_key(k)) {
            return Err(MapError::DuplicateKeyFrame(*k));
        }
        if let Some(m) = other.points.keys().find(|m| self.points.contains_key(m)) {
            return Err(MapError::InvalidInput(format!("{m} present in both maps")));
        }
        for (id, mut kf) in other.keyframes {
            kf.map_id = self.id;
            self.keyframes.insert(id, kf);
        }
        for (id, mut mp) in other.points {
            mp.map_id = self.id;
            self.points.insert(id, mp);
        }
        self.updated_at = self.updated_at.max(other.updated_at);
        self.created_at = self.created_at.min(other.created_at);
        self.kf_insert_count += other.kf_insert_count;
        self.rebuild_covisibility();
        Ok(())
    }

    /// Applies a similarity to every pose and point of the map.
    pub fn transform(&mut self, t: &Sim3Transform) {
        for kf in self.keyframes.values_mut() {
            kf.pose = t.transform_camera_pose(&kf.pose);
        }
        for p in self.points.values_mut() {
            p.position = t.apply(&p.position);
        }
    }

    /// Full scan of referential integrity and covisibility exactness.
    pub fn check_integrity(&self) -> Result<(), MapError> {
        let fail = |m: String| Err(MapError::Integrity(m));
        for (id, kf) in &self.keyframes {
            if kf.map_id != self.id {
                return fail(format!("{id} owned by {} inside {}", kf.map_id, self.id));
            }
            if kf.pose.orthonormality_error() > 1e-9 {
                return fail(format!("{id} pose is not a rigid transform"));
            }
            if kf.observations.len() != kf.keypoints.len() {
                return fail(format!("{id} observation slots mismatch"));
            }
            for (idx, mp) in kf.map_points() {
                match self.points.get(&mp) {
                    None => return fail(format!("{id} observes missing {mp}")),
                    Some(p) if p.observations.get(id) != Some(&idx) => {
                        return fail(format!("{mp} lacks back-reference to {id}:{idx}"))
                    }
                    _ => {}
                }
            }
        }
        for (id, p) in &self.points {
            if p.observations.is_empty() {
                return fail(format!("{id} has no observations"));
            }
            if (p.descriptor.norm() - 1.0).abs() > 1e-6 {
                return fail(format!("{id} descriptor is not unit norm"));
            }
            for (kf, &idx) in &p.observations {
                match self.keyframes.get(kf) {
                    None => return fail(format!("{id} observed by missing {kf}")),
                    Some(k) if k.observations.get(idx) != Some(&Some(*id)) => {
                        return fail(format!("{kf}:{idx} does not point back to {id}"))
                    }
                    _ => {}
                }
            }
        }
        let ids: Vec<KeyFrameId> = self.keyframes.keys().copied().collect();
        for (i, &a) in ids.iter().enumerate() {
            if self.covisibility_weight(a, a) != 0 {
                return fail(format!("self edge at {a}"));
            }
            for &b in &ids[i + 1..] {
                let expected = self.shared_points(a, b);
                let expected = if expected >= self.covis_threshold {
                    expected
                } else {
                    0
                };
                let (wab, wba) = (self.covisibility_weight(a, b), self.covisibility_weight(b, a));
                if wab != wba {
                    return fail(format!("asymmetric edge {a}-{b}"));
                }
                if wab != expected {
                    return fail(format!("edge {a}-{b} has weight {wab}, expected {expected}"));
                }
            }
        }
        Ok(())
    }
}

/// Index-stable medoid: first minimizer wins.
pub(crate) fn medoid<'a>(descs: &[&'a Descriptor]) -> Option<&'a Descriptor> {
    let mut best: Option<(f64, usize)> = None;
    for (i, d) in descs.iter().enumerate() {
        let cost: f64 = descs
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, o)| 1.0 - d.dot(o))
            .sum();
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, i));
        }
    }
    best.map(|(_, i)| descs[i])
}
