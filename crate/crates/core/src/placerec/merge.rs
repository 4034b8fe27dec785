use std::collections::{BTreeMap, BTreeSet};

use super::{KeyFrameDatabase, PlaceRecError, PlaceRecParams};
use crate::camera::{FisheyeCamera, Sim3Transform};
use crate::features::bf_match_bidirectional;
use crate::geometry::{ransac_sim3_normalized, Correspondence3D3D, RansacParams};
use crate::map::{Atlas, KeyFrameId, LandmarkTag, Map, MapId, MapPointId};
use crate::optim::{
    build_essential_graph, essential_graph_optimize, sim3_refine, window_ba, EdgeKind, GraphSettings, LocalBaSettings,
    NoiseModel, OptimError, Sim3Edge, Sim3Match, Sim3RefineSettings,
};
use crate::tracking::{search_by_projection, Candidate, SearchParams};

/// A matched pair of map points: `a` in the query map, `m` in the matched map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointPair {
    pub a: MapPointId,
    pub m: MapPointId,
    pub similarity: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeCandidate {
    pub ka: KeyFrameId,
    pub km: KeyFrameId,
    pub map_a: MapId,
    pub map_m: MapId,
    /// Maps points of `map_a` into the frame of `map_m`.
    pub t_am: Sim3Transform,
    pub pairs: Vec<PointPair>,
    pub ransac_inliers: usize,
    pub score: f64,
}

impl MergeCandidate {
    /// `(agreeing, labelled)` pairs by majority GT landmark tag.
    pub fn gt_agreement(&self, atlas: &Atlas) -> (usize, usize) {
        let (Ok(ma), Ok(mm)) = (atlas.map(self.map_a), atlas.map(self.map_m)) else {
            return (0, 0);
        };
        let mut agree = 0;
        let mut total = 0;
        for p in &self.pairs {
            if let (Some(a), Some(m)) = (point_gt_tag(ma, p.a), point_gt_tag(mm, p.m)) {
                total += 1;
                agree += (a == m) as usize;
            }
        }
        (agree, total)
    }
}

/// Majority GT tag over a point's observations; `None` without labels or
/// when the majority is a clutter tag.
pub fn point_gt_tag(map: &Map, mp: MapPointId) -> Option<LandmarkTag> {
    let p = map.points.get(&mp)?;
    let mut votes: BTreeMap<LandmarkTag, usize> = BTreeMap::new();
    for (kf, idx) in &p.observations {
        if let Some(t) = map.keyframes.get(kf).and_then(|k| k.gt_tag(*idx)) {
            *votes.entry(t).or_default() += 1;
        }
    }
    let (tag, _) = votes.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))?;
    (tag >= 0).then_some(tag)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergeReport {
    pub merged_into: MapId,
    pub retired: MapId,
    pub ka: KeyFrameId,
    pub km: KeyFrameId,
    pub n_fused: usize,
    pub n_keyframes: usize,
    pub n_points: usize,
    pub welding_window: usize,
    pub graph_optimized: bool,
}

fn sim3_match(map_a: &Map, ka: KeyFrameId, map_m: &Map, window_m: &[KeyFrameId], pair: &PointPair) -> Option<Sim3Match> {
    let kfa = map_a.keyframes.get(&ka)?;
    let pa = map_a.points.get(&pair.a)?;
    let pm = map_m.points.get(&pair.m)?;
    let ia = *pa.observations.get(&ka)?;
    let (km, im) = window_m.iter().find_map(|k| pm.observations.get(k).map(|i| (*k, *i))).or_else(|| pm.observations.iter().next().map(|(k, i)| (*k, *i)))?;
    let kfm = map_m.keyframes.get(&km)?;
    Some(Sim3Match {
        point_a: pa.position,
        point_m: pm.position,
        pose_a: kfa.pose,
        pixel_a: kfa.keypoints[ia].pixel,
        octave_a: kfa.keypoints[ia].octave,
        pose_m: kfm.pose,
        pixel_m: kfm.keypoints[im].pixel,
        octave_m: kfm.keypoints[im].octave,
    })
}

fn window(map: &Map, kf: KeyFrameId, n: usize) -> Vec<KeyFrameId> {
    let mut w = vec![kf];
    w.extend(map.best_covisible(kf, n).unwrap_or_default());
    w
}

fn window_points(map: &Map, kfs: &[KeyFrameId]) -> BTreeSet<MapPointId> {
    kfs.iter().filter_map(|k| map.keyframes.get(k)).flat_map(|k| k.map_points().map(|(_, m)| m)).collect()
}

/// Greedy one-to-one selection: best similarity first, lower ids on ties.
fn resolve_pairs(mut pairs: Vec<PointPair>) -> Vec<PointPair> {
    pairs.sort_by(|x, y| y.similarity.total_cmp(&x.similarity).then(x.a.cmp(&y.a)).then(x.m.cmp(&y.m)));
    let (mut used_a, mut used_m) = (BTreeSet::new(), BTreeSet::new());
    let mut out: Vec<PointPair> = pairs.into_iter().filter(|p| used_a.insert(p.a) && used_m.insert(p.m)).collect();
    out.sort_by(|x, y| x.a.cmp(&y.a).then(x.m.cmp(&y.m)));
    out
}

/// Projects map points of each side into the other side's keyframe under
/// `t_am` and matches them against keypoints that carry a map point.
#[allow(clippy::too_many_arguments)]
pub fn guided_matching(
    t_am: &Sim3Transform,
    ka: KeyFrameId,
    map_a: &Map,
    km: KeyFrameId,
    map_m: &Map,
    camera: &FisheyeCamera,
    params: &PlaceRecParams,
    n_window: usize,
) -> Vec<PointPair> {
    let (Some(kfa), Some(kfm)) = (map_a.keyframes.get(&ka), map_m.keyframes.get(&km)) else {
        return Vec::new();
    };
    let search = SearchParams { radius: params.guided_radius, min_similarity: params.min_similarity, ..SearchParams::default() };
    let t_ma = t_am.inverse();
    let mut all = Vec::new();
    let mut pass = |target: &crate::map::KeyFrame, src: &Map, pts: BTreeSet<MapPointId>, to_target: &Sim3Transform, a_is_target: bool| {
        let cands: Vec<Candidate> = pts
            .into_iter()
            .filter_map(|id| {
                let mut c = Candidate::from_map(src, id)?;
                c.position = to_target.apply(&c.position);
                Some(c)
            })
            .collect();
        let taken: Vec<bool> = target.observations.iter().map(|o| o.is_none()).collect();
        let (found, _) = search_by_projection(&cands, &target.keypoints, &target.grid, &taken, &target.pose, camera, &search);
        for f in found {
            let own = target.observations[f.keypoint].expect("free keypoints are masked");
            let other = cands[f.candidate].id;
            let (a, m) = if a_is_target { (own, other) } else { (other, own) };
            all.push(PointPair { a, m, similarity: f.similarity });
        }
    };
    pass(kfa, map_m, window_points(map_m, &window(map_m, km, n_window)), &t_ma, true);
    pass(kfm, map_a, window_points(map_a, &window(map_a, ka, n_window)), t_am, false);
    resolve_pairs(all)
}

fn refine(
    t: &Sim3Transform,
    pairs: &[PointPair],
    map_a: &Map,
    ka: KeyFrameId,
    map_m: &Map,
    window_m: &[KeyFrameId],
    camera: &FisheyeCamera,
    noise: &NoiseModel,
) -> Result<(Sim3Transform, Vec<PointPair>), OptimError> {
    let (kept, matches): (Vec<PointPair>, Vec<Sim3Match>) =
        pairs.iter().filter_map(|p| sim3_match(map_a, ka, map_m, window_m, p).map(|m| (*p, m))).unzip();
    let r = sim3_refine(t, &matches, camera, noise, &Sim3RefineSettings::default())?;
    let inl = kept.into_iter().zip(&r.inliers).filter(|(_, i)| **i).map(|(p, _)| p).collect();
    Ok((r.transform, inl))
}

/// Looks for a keyframe of another map that sees the same place as `ka`.
pub fn detect_merge(
    ka: KeyFrameId,
    atlas: &Atlas,
    db: &KeyFrameDatabase,
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    params: &PlaceRecParams,
    seed: u64,
) -> Option<MergeCandidate> {
    let map_a_id = atlas.map_of_keyframe(ka)?;
    let map_a = atlas.map(map_a_id).ok()?;
    let kfa = map_a.keyframes.get(&ka)?;
    let a_idx: Vec<(usize, MapPointId)> = kfa.map_points().collect();
    if a_idx.len() < params.merge_accept {
        return None;
    }
    let q = db.query_for(&kfa.keypoints.iter().map(|k| k.descriptor.clone()).collect::<Vec<_>>());
    let exclude: BTreeSet<KeyFrameId> = db.keyframes_of(map_a_id).into_iter().collect();
    let mut cands = db.query(&q, &exclude, None, params.relative_score, params.min_score);
    cands.retain(|(k, _)| db.map_of(*k).is_some_and(|m| m != map_a_id && atlas.contains(m)));
    cands.truncate(params.n_candidates);
    let depth_a = map_a.median_depth(ka)?;
    for (km, score) in cands {
        let Some(map_m_id) = atlas.map_of_keyframe(km) else { continue };
        let Ok(map_m) = atlas.map(map_m_id) else { continue };
        let Some(depth_m) = map_m.median_depth(km) else { continue };
        let win = window(map_m, km, 2);
        let m_pts: Vec<MapPointId> = window_points(map_m, &win).into_iter().collect();
        let a_descs: Vec<_> = a_idx.iter().map(|(i, _)| &kfa.keypoints[*i].descriptor).collect();
        let m_descs: Vec<_> = m_pts.iter().map(|m| &map_m.points[m].descriptor).collect();
        let bf = bf_match_bidirectional(&a_descs, &m_descs, params.nndr);
        let putative: Vec<PointPair> = bf
            .pairs
            .iter()
            .filter(|p| p.similarity >= params.min_similarity)
            .filter(|p| map_a.points.contains_key(&a_idx[p.index_a].1))
            .map(|p| PointPair { a: a_idx[p.index_a].1, m: m_pts[p.index_b], similarity: p.similarity })
            .collect();
        if putative.len() < params.min_ransac_inliers {
            continue;
        }
        let corrs: Vec<Correspondence3D3D> = putative
            .iter()
            .enumerate()
            .map(|(i, p)| Correspondence3D3D { a: map_a.points[&p.a].position, b: map_m.points[&p.m].position, index_a: i, index_b: i })
            .collect();
        let ransac = RansacParams {
            max_iterations: params.sim3_iterations,
            inlier_threshold: params.sim3_threshold,
            min_inliers_accept: params.min_ransac_inliers,
            confidence: 0.999,
            rng_seed: seed ^ km.0,
        };
        let Ok((t0, inliers)) = ransac_sim3_normalized(&corrs, &ransac, depth_a, depth_m) else { continue };
        let inl: Vec<PointPair> = putative.iter().zip(&inliers).filter(|(_, i)| **i).map(|(p, _)| *p).collect();
        if inl.len() < params.min_ransac_inliers {
            continue;
        }
        let Ok((t1, _)) = refine(&t0, &inl, map_a, ka, map_m, &win, camera, noise) else { continue };
        let guided = guided_matching(&t1, ka, map_a, km, map_m, camera, params, 10);
        if guided.len() < params.merge_accept {
            continue;
        }
        let (t_am, pairs) = match refine(&t1, &guided, map_a, ka, map_m, &win, camera, noise) {
            Ok((t, p)) if p.len() >= params.merge_accept => (t, p),
            _ => continue,
        };
        return Some(MergeCandidate { ka, km, map_a: map_a_id, map_m: map_m_id, t_am, pairs, ransac_inliers: inl.len(), score });
    }
    None
}

/// Moves `map_a` into `map_m`'s frame, fuses the matched points, welds the
/// seam with a windowed BA and spreads the correction over the rest of the
/// absorbed map with an essential-graph optimization. `map_m` stays active.
pub fn merge_maps(
    atlas: &mut Atlas,
    db: &mut KeyFrameDatabase,
    cand: &MergeCandidate,
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    weld: &LocalBaSettings,
    theta_essential: u32,
) -> Result<MergeReport, PlaceRecError> {
    if cand.map_a == cand.map_m {
        return Err(PlaceRecError::InvalidInput("self-merge".into()));
    }
    let stale = |what: String| PlaceRecError::Stale(what);
    let ma = atlas.map(cand.map_a).map_err(|e| stale(e.to_string()))?;
    let mm = atlas.map(cand.map_m).map_err(|e| stale(e.to_string()))?;
    if !ma.keyframes.contains_key(&cand.ka) || !mm.keyframes.contains_key(&cand.km) {
        return Err(stale("candidate keyframe erased".into()));
    }
    let mut map_a = atlas.retire_map(cand.map_a, cand.map_m).map_err(|e| stale(e.to_string()))?;
    map_a.transform(&cand.t_am);
    let original_m: BTreeSet<KeyFrameId> = atlas.map(cand.map_m).map_err(|e| stale(e.to_string()))?.keyframes.keys().copied().collect();
    let map = atlas.map_mut(cand.map_m).map_err(|e| stale(e.to_string()))?;
    map.absorb(map_a).map_err(|e| PlaceRecError::InvalidInput(e.to_string()))?;
    let mut n_fused = 0;
    for p in &cand.pairs {
        let (Some(pa), Some(pm)) = (map.points.get(&p.a), map.points.get(&p.m)) else { continue };
        if p.a == p.m {
            continue;
        }
        let (old, keep) = if pa.n_observations() > pm.n_observations() { (p.m, p.a) } else { (p.a, p.m) };
        if map.replace_map_point(old, keep).is_ok() {
            n_fused += 1;
            let _ = map.refresh_descriptor(keep);
        }
    }
    map.rebuild_covisibility();
    let mut edges = build_essential_graph(map, theta_essential);
    let mut welding: BTreeSet<KeyFrameId> = window(map, cand.ka, weld.window).into_iter().collect();
    welding.extend(window(map, cand.km, weld.window));
    window_ba(map, welding.clone(), noise, camera, None, weld).map_err(|e| PlaceRecError::InvalidInput(e.to_string()))?;
    let sims: BTreeMap<KeyFrameId, Sim3Transform> = [cand.ka, cand.km].iter().map(|k| (*k, map.keyframes[k].pose.to_sim3())).collect();
    edges.push(Sim3Edge::between(cand.ka, &sims[&cand.ka], cand.km, &sims[&cand.km], EdgeKind::Merge));
    let mut fixed = original_m;
    fixed.extend(welding.iter().copied());
    let graph_optimized = if map.keyframes.keys().any(|k| !fixed.contains(k)) {
        match essential_graph_optimize(map, &edges, &fixed, &GraphSettings::default()) {
            Ok(_) => true,
            Err(OptimError::InvalidInput(_)) => false,
            Err(e) => return Err(PlaceRecError::InvalidInput(e.to_string())),
        }
    } else {
        false
    };
    let report = MergeReport {
        merged_into: cand.map_m,
        retired: cand.map_a,
        ka: cand.ka,
        km: cand.km,
        n_fused,
        n_keyframes: map.n_keyframes(),
        n_points: map.n_points(),
        welding_window: welding.len(),
        graph_optimized,
    };
    db.reassign_map(cand.map_a, cand.map_m);
    Ok(report)
}
