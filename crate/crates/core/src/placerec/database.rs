use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BowVector, Vocabulary};
use crate::map::{Descriptor, KeyFrameId, MapId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    /// Inverted-index tf-idf scoring.
    Bow,
    /// Mean best-descriptor similarity against every keyframe, for tiny maps.
    Exhaustive,
}

#[derive(Clone, Debug)]
struct Entry {
    map: MapId,
    bow: BowVector,
    descriptors: Vec<Descriptor>,
}

/// A keyframe or frame prepared for retrieval.
#[derive(Clone, Debug)]
pub struct Query {
    pub bow: BowVector,
    pub descriptors: Vec<Descriptor>,
}

#[derive(Clone, Debug)]
pub struct KeyFrameDatabase {
    vocabulary: Arc<Vocabulary>,
    mode: RetrievalMode,
    entries: BTreeMap<KeyFrameId, Entry>,
    inverted: BTreeMap<u32, BTreeSet<KeyFrameId>>,
}

impl KeyFrameDatabase {
    pub fn new(vocabulary: Arc<Vocabulary>, mode: RetrievalMode) -> Self {
        Self { vocabulary, mode, entries: BTreeMap::new(), inverted: BTreeMap::new() }
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, kf: KeyFrameId) -> bool {
        self.entries.contains_key(&kf)
    }

    pub fn map_of(&self, kf: KeyFrameId) -> Option<MapId> {
        self.entries.get(&kf).map(|e| e.map)
    }

    pub fn query_for(&self, descriptors: &[Descriptor]) -> Query {
        Query { bow: self.vocabulary.transform(descriptors), descriptors: descriptors.to_vec() }
    }

    /// Indexes a keyframe, replacing any previous entry.
    pub fn add(&mut self, kf: KeyFrameId, map: MapId, descriptors: &[Descriptor]) {
        self.remove(kf);
        let q = self.query_for(descriptors);
        for w in q.bow.0.keys() {
            self.inverted.entry(*w).or_default().insert(kf);
        }
        self.entries.insert(kf, Entry { map, bow: q.bow, descriptors: q.descriptors });
    }

    pub fn remove(&mut self, kf: KeyFrameId) -> bool {
        let Some(e) = self.entries.remove(&kf) else {
            return false;
        };
        for w in e.bow.0.keys() {
            if let Some(set) = self.inverted.get_mut(w) {
                set.remove(&kf);
                if set.is_empty() {
                    self.inverted.remove(w);
                }
            }
        }
        true
    }

    /// Re-points every entry of map `from` to map `to`.
    pub fn reassign_map(&mut self, from: MapId, to: MapId) {
        for e in self.entries.values_mut() {
            if e.map == from {
                e.map = to;
            }
        }
    }

    pub fn keyframes_of(&self, map: MapId) -> Vec<KeyFrameId> {
        self.entries.iter().filter(|(_, e)| e.map == map).map(|(k, _)| *k).collect()
    }

    fn exhaustive_score(query: &[Descriptor], e: &Entry) -> f64 {
        if query.is_empty() || e.descriptors.is_empty() {
            return 0.0;
        }
        let total: f64 = query
            .iter()
            .map(|q| e.descriptors.iter().map(|d| q.dot(d)).fold(0.0, f64::max))
            .sum();
        total / query.len() as f64
    }

    /// Keyframes scoring at least `relative × best` and `min_score`, best
    /// first (lower id on ties). Keyframes in `exclude` never appear;
    /// `restrict_to_map` keeps only that map.
    pub fn query(
        &self,
        query: &Query,
        exclude: &BTreeSet<KeyFrameId>,
        restrict_to_map: Option<MapId>,
        relative: f64,
        min_score: f64,
    ) -> Vec<(KeyFrameId, f64)> {
        let admissible = |kf: &KeyFrameId, e: &Entry| !exclude.contains(kf) && restrict_to_map.is_none_or(|m| e.map == m);
        let mut scored: Vec<(KeyFrameId, f64)> = match self.mode {
            RetrievalMode::Bow => {
                let mut shared: BTreeSet<KeyFrameId> = BTreeSet::new();
                for w in query.bow.0.keys() {
                    if let Some(set) = self.inverted.get(w) {
                        shared.extend(set.iter().copied());
                    }
                }
                shared
                    .into_iter()
                    .filter_map(|kf| {
                        let e = &self.entries[&kf];
                        admissible(&kf, e).then(|| (kf, query.bow.score(&e.bow)))
                    })
                    .collect()
            }
            RetrievalMode::Exhaustive => self
                .entries
                .iter()
                .filter(|(kf, e)| admissible(kf, e))
                .map(|(kf, e)| (*kf, Self::exhaustive_score(&query.descriptors, e)))
                .collect(),
        };
        let best = scored.iter().map(|s| s.1).fold(0.0, f64::max);
        scored.retain(|s| s.1 >= min_score && s.1 >= relative * best && s.1 > 0.0);
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }

    /// Checks that every entry belongs to a known keyframe.
    pub fn check_against(&self, known: &BTreeMap<KeyFrameId, MapId>) -> Result<(), String> {
        for (kf, e) in &self.entries {
            match known.get(kf) {
                None => return Err(format!("database indexes missing {kf}")),
                Some(m) if *m != e.map => return Err(format!("database places {kf} in {} instead of {m}", e.map)),
                _ => {}
            }
        }
        for (w, set) in &self.inverted {
            if let Some(kf) = set.iter().find(|k| !self.entries.contains_key(k)) {
                return Err(format!("word {w} posts removed {kf}"));
            }
        }
        Ok(())
    }
}
