use std::collections::BTreeSet;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::map::testutil::{keyframe, map_with_sets};
use crate::map::{Atlas, KeyPoint, MapId};
use crate::simulator::random_descriptor;

struct TwoViews {
    cam: FisheyeCamera,
    landmarks: Vec<Vector3<f64>>,
    map: Map,
    atlas: Atlas,
}

/// Two keyframes observing the same 50 landmarks, no points yet.
fn two_views(baseline: f64) -> TwoViews {
    let cam = FisheyeCamera::equidistant(300.0, 640, 480);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let landmarks: Vec<Vector3<f64>> =
        (0..50).map(|_| Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0), rng.random_range(4.0..6.0))).collect();
    let descs: Vec<_> = landmarks.iter().map(|_| random_descriptor(&mut rng, 0.25)).collect();
    let poses = [SE3Pose::identity(), SE3Pose::new(UnitQuaternion::identity(), Vector3::new(-baseline, 0.0, 0.0))];
    let mut atlas = Atlas::default();
    let id = atlas.create_map(0.0);
    let mut map = Map::new(id, 0.0, 15);
    for (k, pose) in poses.iter().enumerate() {
        let kps: Vec<KeyPoint> = landmarks
            .iter()
            .zip(&descs)
            .map(|(p, d)| KeyPoint { pixel: cam.project(&pose.transform_point(p)).unwrap(), octave: 0, descriptor: d.clone(), intensity: 0.2 })
            .collect();
        let mut f = Frame::new(k as u64, k as f64, kps);
        f.pose = Some(*pose);
        let kid = atlas.next_keyframe_id();
        insert_keyframe(&mut map, kid, &f, (k == 1).then_some(KeyFrameId(0)), &cam, None).unwrap();
    }
    TwoViews { cam, landmarks, map, atlas }
}

#[test]
fn creates_points_at_ground_truth() {
    let mut tv = two_views(0.5);
    let (_, mut ids) = tv.atlas.map_and_ids(MapId(0)).unwrap();
    let new = create_map_points(&mut tv.map, KeyFrameId(1), &mut ids, &tv.cam, &NoiseModel::default(), &MappingParams::default()).unwrap();
    assert!(new.len() >= 45, "{}", new.len());
    for id in &new {
        let p = &tv.map.points[id];
        let idx = p.observations[&KeyFrameId(0)];
        assert!((p.position - tv.landmarks[idx]).norm() < 1e-6);
        assert_eq!(tv.map.keyframes[&KeyFrameId(1)].observations[p.observations[&KeyFrameId(1)]], Some(*id));
    }
    tv.map.check_integrity().unwrap();
}

#[test]
fn zero_baseline_creates_nothing() {
    let mut tv = two_views(0.0);
    let (_, mut ids) = tv.atlas.map_and_ids(MapId(0)).unwrap();
    let new = create_map_points(&mut tv.map, KeyFrameId(1), &mut ids, &tv.cam, &NoiseModel::default(), &MappingParams::default()).unwrap();
    assert!(new.is_empty());
}

#[test]
fn point_culling_rules() {
    // kf0..kf2 exist; point 0 seen by all three, point 1 by two, point 2 by three but rarely found
    let mut map = map_with_sets(&[vec![0, 1, 2], vec![0, 1, 2], vec![0, 2]]);
    for p in map.points.values_mut() {
        p.n_visible = 4;
        p.n_found = 4;
    }
    map.points.get_mut(&MapPointId(2)).unwrap().n_visible = 20;
    let mut recent: BTreeSet<MapPointId> = map.points.keys().copied().collect();
    let removed = cull_map_points(&mut map, &mut recent, &MappingParams::default());
    assert_eq!(removed, vec![MapPointId(1), MapPointId(2)]);
    assert!(map.points.contains_key(&MapPointId(0)));
    assert!(recent.is_empty(), "three keyframes old: probation is over");
    map.check_integrity().unwrap();

    let mut young = map_with_sets(&[vec![0], vec![0]]);
    young.kf_insert_count = 1;
    let mut recent = BTreeSet::from([MapPointId(0)]);
    assert!(cull_map_points(&mut young, &mut recent, &MappingParams::default()).is_empty());
}

#[test]
fn redundant_keyframe_is_culled_but_protected_ones_stay() {
    let set: Vec<u64> = (0..30).collect();
    let sets = vec![set.clone(); 5];
    let mut map = map_with_sets(&sets);
    let culled = cull_keyframes(&mut map, KeyFrameId(4), &BTreeSet::new(), &MappingParams::default(), None).unwrap();
    let ids: Vec<KeyFrameId> = culled.iter().map(|c| c.id).collect();
    assert_eq!(ids, vec![KeyFrameId(1), KeyFrameId(2)]);
    assert!(map.keyframes.contains_key(&KeyFrameId(0)) && map.keyframes.contains_key(&KeyFrameId(4)));
    assert!(map.points.values().all(|p| !p.observations.is_empty()));
    map.check_integrity().unwrap();

    let mut map = map_with_sets(&sets);
    let culled = cull_keyframes(&mut map, KeyFrameId(4), &BTreeSet::from([KeyFrameId(1)]), &MappingParams::default(), None).unwrap();
    assert_eq!(culled.iter().map(|c| c.id).collect::<Vec<_>>(), vec![KeyFrameId(2), KeyFrameId(3)]);

    let mut small = map_with_sets(&[set.clone(), set]);
    assert!(cull_keyframes(&mut small, KeyFrameId(1), &BTreeSet::new(), &MappingParams::default(), None).unwrap().is_empty());
}

#[test]
fn keyframe_insertion() {
    let cam = FisheyeCamera::equidistant(300.0, 640, 480);
    let kps = keyframe(0, 41).keypoints;
    let mut f = Frame::new(5, 0.5, kps.clone());
    f.pose = Some(SE3Pose::identity());
    let mut map = Map::new(MapId(0), 0.0, 15);
    insert_keyframe(&mut map, KeyFrameId(10), &f, None, &cam, None).unwrap();
    assert_eq!(map.n_keyframes(), 1);
    assert!(map.neighbors(KeyFrameId(10)).is_empty());

    let mut map = map_with_sets(&[(0..40).collect()]);
    let mut g = Frame::new(6, 0.6, kps.clone());
    g.pose = Some(SE3Pose::identity());
    g.map_point_matches = (0..40).map(|i| (i, MapPointId(i as u64))).collect();
    insert_keyframe(&mut map, KeyFrameId(1), &g, None, &cam, None).unwrap();
    assert_eq!(map.covisibility_weight(KeyFrameId(0), KeyFrameId(1)), 40);
    assert_eq!(map.keyframes[&KeyFrameId(1)].parent, Some(KeyFrameId(0)));

    let mut bad = g.clone();
    bad.map_point_matches.insert(40, MapPointId(999));
    assert!(matches!(insert_keyframe(&mut map, KeyFrameId(2), &bad, None, &cam, None), Err(MapError::InvalidInput(_))));
    assert!(insert_keyframe(&mut map, KeyFrameId(1), &g, None, &cam, None).is_err());
}

#[test]
fn epipolar_gate_is_zero_on_consistent_rays() {
    let p1 = SE3Pose::identity();
    let p2 = SE3Pose::new(UnitQuaternion::from_euler_angles(0.0, 0.1, 0.0), Vector3::new(-0.3, 0.05, 0.0));
    let x = Vector3::new(0.4, -0.2, 5.0);
    let (r1, r2) = (p1.transform_point(&x).normalize(), p2.transform_point(&x).normalize());
    assert!(epipolar_chi2(&p1, &p2, &r1, &r2, 300.0, 1.0) < 1e-18);
    let off = (r2 + Vector3::new(0.0, 0.01, 0.0)).normalize();
    assert!(epipolar_chi2(&p1, &p2, &r1, &off, 300.0, 1.0) > CHI2_1DOF_95);
}
