use std::collections::BTreeMap;

use super::{KeyFrameId, Map, MapError, MapId, MapPointId, DEFAULT_COVIS_THRESHOLD};

/// Borrowed atlas id counters.
#[derive(Debug)]
pub struct IdSource<'a> {
    next_kf: &'a mut u64,
    next_mp: &'a mut u64,
}

impl IdSource<'_> {
    pub fn keyframe(&mut self) -> KeyFrameId {
        let id = KeyFrameId(*self.next_kf);
        *self.next_kf += 1;
        id
    }

    pub fn map_point(&mut self) -> MapPointId {
        let id = MapPointId(*self.next_mp);
        *self.next_mp += 1;
        id
    }
}

/// All maps of a session: exactly one active map (once the first map exists)
/// plus any number of non-active ones.
#[derive(Clone, Debug)]
pub struct Atlas {
    maps: BTreeMap<MapId, Map>,
    active: Option<MapId>,
    next_map: u32,
    next_kf: u64,
    next_mp: u64,
    retired: Vec<MapId>,
    covis_threshold: u32,
}

impl Default for Atlas {
    fn default() -> Self {
        Self::new(DEFAULT_COVIS_THRESHOLD)
    }
}

impl Atlas {
    pub fn new(covis_threshold: u32) -> Self {
        Self {
            maps: BTreeMap::new(),
            active: None,
            next_map: 0,
            next_kf: 0,
            next_mp: 0,
            retired: Vec::new(),
            covis_threshold,
        }
    }

    pub fn covis_threshold(&self) -> u32 {
        self.covis_threshold
    }

    /// Adds an empty map and makes it active.
    pub fn create_map(&mut self, timestamp: f64) -> MapId {
        let id = MapId(self.next_map);
        self.next_map += 1;
        self.maps
            .insert(id, Map::new(id, timestamp, self.covis_threshold));
        self.active = Some(id);
        id
    }

    pub fn n_maps(&self) -> usize {
        self.maps.len()
    }

    /// Number of maps ever created.
    pub fn n_created(&self) -> u32 {
        self.next_map
    }

    pub fn active_id(&self) -> Option<MapId> {
        self.active
    }

    pub fn active_map(&self) -> Option<&Map> {
        self.active.and_then(|id| self.maps.get(&id))
    }

    pub fn active_map_mut(&mut self) -> Option<&mut Map> {
        let id = self.active?;
        self.maps.get_mut(&id)
    }

    pub fn set_active(&mut self, id: MapId) -> Result<(), MapError> {
        if !self.maps.contains_key(&id) {
            return Err(MapError::MapNotFound(id));
        }
        self.active = Some(id);
        Ok(())
    }

    pub fn map(&self, id: MapId) -> Result<&Map, MapError> {
        self.maps.get(&id).ok_or(MapError::MapNotFound(id))
    }

    pub fn map_mut(&mut self, id: MapId) -> Result<&mut Map, MapError> {
        self.maps.get_mut(&id).ok_or(MapError::MapNotFound(id))
    }

    /// Mutable access to two distinct maps at once.
    pub fn two_maps_mut(&mut self, a: MapId, b: MapId) -> Result<(&mut Map, &mut Map), MapError> {
        if a == b {
            return Err(MapError::InvalidInput(format!("{a} requested twice")));
        }
        if !self.maps.contains_key(&a) {
            return Err(MapError::MapNotFound(a));
        }
        if !self.maps.contains_key(&b) {
            return Err(MapError::MapNotFound(b));
        }
        let mut it = self.maps.iter_mut().filter(|(id, _)| **id == a || **id == b);
        let (id0, m0) = it.next().unwrap();
        let (_, m1) = it.next().unwrap();
        if *id0 == a {
            Ok((m0, m1))
        } else {
            Ok((m1, m0))
        }
    }

    pub fn maps(&self) -> impl Iterator<Item = &Map> {
        self.maps.values()
    }

    pub fn map_ids(&self) -> Vec<MapId> {
        self.maps.keys().copied().collect()
    }

    pub fn contains(&self, id: MapId) -> bool {
        self.maps.contains_key(&id)
    }

    /// Removes a map after it has been merged into another one. Its id is
    /// never reused. If it was active, `successor` becomes active.
    pub fn retire_map(&mut self, id: MapId, successor: MapId) -> Result<Map, MapError> {
        if id == successor || !self.maps.contains_key(&successor) {
            return Err(MapError::MapNotFound(successor));
        }
        let map = self.maps.remove(&id).ok_or(MapError::MapNotFound(id))?;
        self.retired.push(id);
        if self.active == Some(id) {
            self.active = Some(successor);
        }
        Ok(map)
    }

    pub fn retired(&self) -> &[MapId] {
        &self.retired
    }

    pub fn next_keyframe_id(&mut self) -> KeyFrameId {
        let id = KeyFrameId(self.next_kf);
        self.next_kf += 1;
        id
    }

    pub fn next_map_point_id(&mut self) -> MapPointId {
        let id = MapPointId(self.next_mp);
        self.next_mp += 1;
        id
    }

    /// A map together with the atlas id counters, so new keyframes and
    /// points can be allocated while the map is borrowed.
    pub fn map_and_ids(&mut self, id: MapId) -> Result<(&mut Map, IdSource<'_>), MapError> {
        let map = self.maps.get_mut(&id).ok_or(MapError::MapNotFound(id))?;
        Ok((map, IdSource { next_kf: &mut self.next_kf, next_mp: &mut self.next_mp }))
    }

    /// Finds the map holding a keyframe.
    pub fn map_of_keyframe(&self, kf: KeyFrameId) -> Option<MapId> {
        self.maps
            .values()
            .find(|m| m.keyframes.contains_key(&kf))
            .map(|m| m.id)
    }

    pub fn check_invariants(&self) -> Result<(), MapError> {
        if !self.maps.is_empty() {
            match self.active {
                Some(a) if self.maps.contains_key(&a) => {}
                _ => return Err(MapError::Integrity("no valid active map".into())),
            }
        }
        for m in self.maps.values() {
            m.check_integrity()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_map_is_active() {
        let mut atlas = Atlas::default();
        assert!(atlas.active_id().is_none());
        let id = atlas.create_map(0.0);
        assert_eq!(atlas.n_maps(), 1);
        assert_eq!(atlas.active_id(), Some(id));
    }

    #[test]
    fn second_map_takes_over() {
        let mut atlas = Atlas::default();
        let a = atlas.create_map(0.0);
        let b = atlas.create_map(1.0);
        assert_eq!(atlas.n_maps(), 2);
        assert_eq!(atlas.active_id(), Some(b));
        assert_ne!(a, b);
        assert!(atlas.contains(a));
    }

    #[test]
    fn five_maps_unique_and_one_active() {
        let mut atlas = Atlas::default();
        let ids: Vec<_> = (0..5).map(|i| atlas.create_map(i as f64)).collect();
        let mut dedup = ids.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
        assert_eq!(atlas.n_maps(), 5);
        let active: Vec<_> = atlas
            .map_ids()
            .into_iter()
            .filter(|id| Some(*id) == atlas.active_id())
            .collect();
        assert_eq!(active.len(), 1);
        atlas.check_invariants().unwrap();
    }

    #[test]
    fn retiring_hands_over_active_and_never_reuses_id() {
        let mut atlas = Atlas::default();
        let a = atlas.create_map(0.0);
        let b = atlas.create_map(1.0);
        atlas.retire_map(b, a).unwrap();
        assert_eq!(atlas.active_id(), Some(a));
        assert_eq!(atlas.n_maps(), 1);
        let c = atlas.create_map(2.0);
        assert!(c != b && c != a);
        assert_eq!(atlas.retired(), &[b]);
    }
}
