//! End-to-end acceptance suite. Each test prints one verdict line to the
//! process stderr (outside the harness capture) and then asserts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use atlas_slam::camera::{FisheyeCamera, SE3Pose, Sim3Transform};
use atlas_slam::evaluation::{ate, default_tolerance, map_stats, revisit_hits, RunStats};
use atlas_slam::features::{build_masks, filter_keypoints, IntensityGrid};
use atlas_slam::geometry::{
    eight_point_fundamental, essential_from_fundamental, horn_sim3, motion_from_essential, pnp_ransac, Correspondence2D2D,
    Correspondence2D3D, RansacParams,
};
use atlas_slam::io::{write_trajectory, TrajectoryEntry};
use atlas_slam::map::{Descriptor, Frame, KeyFrame, KeyFrameId, KeyPoint, Map, MapId, MapPoint, MapPointId};
use atlas_slam::optim::{
    full_ba, optimize_pose_graph, pose_only_optimize, reprojection_jacobian, reprojection_residual, sigma, sim3_refine, BaObservation,
    BaProblem, BaSettings, EdgeKind, GraphSettings, NoiseModel, PoseObservation, PoseOnlySettings, Sim3Edge, Sim3Match,
    Sim3RefineSettings, CHI2_2DOF_95,
};
use atlas_slam::pipeline::{build_core, run_sequential, PipelineConfig, RunEvent, RunOutput};
use atlas_slam::simulator::{default_camera, generate_sequence, gt_entries, Scenario};
use nalgebra::{Matrix2x3, Matrix2x6, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn verdict(criterion: u32, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {criterion:>2}: {tag} {detail}");
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> UnitQuaternion<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis.normalize() };
    UnitQuaternion::from_scaled_axis(axis * rng.random_range(0.0..max_angle))
}

fn random_vec(rng: &mut ChaCha8Rng, r: f64) -> Vector3<f64> {
    Vector3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn random_sim3(rng: &mut ChaCha8Rng) -> Sim3Transform {
    Sim3Transform::new(rng.random_range(-1.5f64..1.5).exp(), random_rotation(rng, 3.1), random_vec(rng, 10.0))
}

fn monotone(costs: &[f64]) -> bool {
    costs.windows(2).all(|w| w[1] <= w[0])
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------------------
// 1. similarity alignment

#[test]
fn c01_horn_recovers_random_similarities() {
    let t0 = Instant::now();
    let (mut es, mut er, mut et) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_sim3(&mut rng);
        let a: Vec<Vector3<f64>> = (0..10).map(|_| random_vec(&mut rng, 5.0)).collect();
        let b: Vec<Vector3<f64>> = a.iter().map(|p| g.apply(p)).collect();
        let est = horn_sim3(&a, &b).unwrap();
        es = es.max((est.scale - g.scale).abs());
        er = er.max(est.rotation.angle_to(&g.rotation));
        et = et.max((est.translation - g.translation).norm());
    }
    let dt = t0.elapsed().as_secs_f64();
    let ok = es < 1e-9 && er < 1e-9 && et < 1e-9 && dt < 1.0;
    verdict(1, ok, &format!("horn_sim3 max errors scale {es:.1e} rot {er:.1e} rad trans {et:.1e} in {dt:.3}s"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 2. two-view geometry

struct TwoViewScene {
    rel: SE3Pose,
    corrs: Vec<Correspondence2D2D>,
}

/// Pinhole views of a random cloud. With `pixel_noise > 0` the normalized
/// coordinates are perturbed by `pixel_noise / fx`.
fn two_view_scene(rng: &mut ChaCha8Rng, n: usize, pixel_noise: f64, fx: f64) -> TwoViewScene {
    let rot = random_rotation(rng, 0.3);
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)).normalize();
    let rel = SE3Pose::new(rot, t);
    let nd = Normal::new(0.0, (pixel_noise / fx).max(1e-300)).unwrap();
    let jitter = |rng: &mut ChaCha8Rng, p: Vector3<f64>| {
        let (x, y) = (p.x / p.z, p.y / p.z);
        if pixel_noise > 0.0 {
            Vector3::new(x + nd.sample(rng), y + nd.sample(rng), 1.0).normalize()
        } else {
            p.normalize()
        }
    };
    let mut corrs = Vec::with_capacity(n);
    while corrs.len() < n {
        let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(4.0..10.0));
        let x2 = rel.transform_point(&x);
        if x2.z < 1.0 {
            continue;
        }
        let (r1, r2) = (jitter(rng, x), jitter(rng, x2));
        let mut c = Correspondence2D2D::new(r1, r2);
        c.index_1 = corrs.len();
        c.index_2 = corrs.len();
        corrs.push(c);
    }
    TwoViewScene { rel, corrs }
}

fn two_view_errors(s: &TwoViewScene) -> (f64, f64) {
    let pairs: Vec<_> = s.corrs.iter().map(|c| c.normalized().unwrap()).collect();
    let f = eight_point_fundamental(&pairs).unwrap();
    let e = essential_from_fundamental(&f);
    let m = motion_from_essential(&e, &s.corrs).unwrap();
    (m.pose.rotation.angle_to(&s.rel.rotation), angle_between(&m.pose.translation, &s.rel.translation))
}

#[test]
fn c02_two_view_motion_recovery() {
    let t0 = Instant::now();
    let (mut er, mut et) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (r, t) = two_view_errors(&two_view_scene(&mut rng, 100, 0.0, 600.0));
        er = er.max(r);
        et = et.max(t);
    }
    let noisy: Vec<f64> = (0..100)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
            two_view_errors(&two_view_scene(&mut rng, 100, 0.5, 600.0)).0.to_degrees()
        })
        .collect();
    let med = median(noisy);
    let dt = t0.elapsed().as_secs_f64();
    let ok = er < 1e-6 && et < 1e-6 && med < 0.5 && dt < 10.0;
    verdict(
        2,
        ok,
        &format!("noiseless max rot {er:.1e} rad, trans dir {et:.1e} rad; 0.5 px median rot {med:.4} deg; {dt:.2}s"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 3. robust resection

fn pnp_problem(rng: &mut ChaCha8Rng, cam: &FisheyeCamera, n: usize) -> (SE3Pose, Vec<Correspondence2D3D>) {
    let rot = UnitQuaternion::from_euler_angles(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-3.0..3.0));
    let pose = SE3Pose::new(rot, random_vec(rng, 1.0));
    let inv = pose.inverse();
    let mut out = Vec::new();
    while out.len() < n {
        let pc = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(2.0..8.0));
        let Ok(px) = cam.project(&pc) else { continue };
        if !cam.contains(&px) {
            continue;
        }
        let idx = out.len();
        out.push(Correspondence2D3D {
            pixel: px,
            bearing: pc.normalize(),
            octave: rng.random_range(0..4),
            point: inv.transform_point(&pc),
            index_2d: idx,
            index_3d: idx,
        });
    }
    (pose, out)
}

#[test]
fn c03_pnp_with_planted_outliers() {
    let t0 = Instant::now();
    let cam = default_camera();
    let noise = NoiseModel::default();
    let (n, n_out) = (50usize, 20usize);
    let (mut worst, mut tp, mut fp, mut fneg) = (0.0f64, 0usize, 0usize, 0usize);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (gt, mut m) = pnp_problem(&mut rng, &cam, n);
        for c in m.iter_mut().skip(n - n_out) {
            let true_px = c.pixel;
            loop {
                c.pixel = Vector2::new(rng.random_range(0.0..cam.width as f64), rng.random_range(0.0..cam.height as f64));
                if (c.pixel - true_px).norm() > 20.0 * noise.sigma(c.octave) {
                    break;
                }
            }
            c.bearing = cam.unproject(&c.pixel).unwrap();
        }
        let params = RansacParams { inlier_threshold: CHI2_2DOF_95, min_inliers_accept: 12, max_iterations: 1000, rng_seed: seed, ..Default::default() };
        let (p, mask) = pnp_ransac(&m, &cam, &noise, &params).unwrap();
        worst = worst.max(p.rotation.angle_to(&gt.rotation)).max((p.translation - gt.translation).norm());
        for (i, &inl) in mask.iter().enumerate() {
            match (inl, i < n - n_out) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    let recall = tp as f64 / (tp + fneg) as f64;
    let precision = tp as f64 / (tp + fp).max(1) as f64;
    let ok = worst < 1e-3 && recall == 1.0 && precision == 1.0 && dt < 10.0;
    verdict(3, ok, &format!("pose error {worst:.1e}, recall {recall:.3}, precision {precision:.3}, {dt:.2}s"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 4. optimizers

fn fd_check(rng: &mut ChaCha8Rng, cam: &FisheyeCamera) -> f64 {
    let pose = SE3Pose::new(random_rotation(rng, 3.1), random_vec(rng, 5.0));
    let pc = loop {
        let pc = Vector3::new(rng.random_range(-6.0..6.0), rng.random_range(-5.0..5.0), rng.random_range(1.0..10.0));
        if cam.project(&pc).is_ok_and(|px| cam.contains(&px)) {
            break pc;
        }
    };
    let x = pose.inverse().transform_point(&pc);
    let pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
    let j = reprojection_jacobian(&pose, &x, &pixel, cam).unwrap();
    let h = 1e-6;
    let mut d_pose = Matrix2x6::zeros();
    for i in 0..6 {
        let mut d = [0.0; 6];
        d[i] = h;
        let plus = reprojection_residual(&pose.retract(&d), &x, &pixel, cam).unwrap();
        d[i] = -h;
        let minus = reprojection_residual(&pose.retract(&d), &x, &pixel, cam).unwrap();
        d_pose.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    let mut d_point = Matrix2x3::zeros();
    for i in 0..3 {
        let mut e = Vector3::zeros();
        e[i] = h;
        let plus = reprojection_residual(&pose, &(x + e), &pixel, cam).unwrap();
        let minus = reprojection_residual(&pose, &(x - e), &pixel, cam).unwrap();
        d_point.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    let rp = (j.d_pose - d_pose).norm() / j.d_pose.norm().max(1e-12);
    let rx = (j.d_point - d_point).norm() / j.d_point.norm().max(1e-12);
    rp.max(rx)
}

/// Cameras on a short arc looking at a cloud, plus a perturbed copy.
fn ba_problem(seed: u64, n_cams: usize, n_pts: usize, pixel_noise: f64, perturb: f64) -> (BaProblem, FisheyeCamera) {
    let cam = default_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses: Vec<SE3Pose> = (0..n_cams)
        .map(|i| {
            let c = Vector3::new(0.3 * i as f64, 0.05 * (i as f64).sin(), 0.0);
            let q = UnitQuaternion::from_euler_angles(0.0, -0.02 * i as f64, 0.0);
            SE3Pose::new(q, -(q * c))
        })
        .collect();
    let points: Vec<Vector3<f64>> =
        (0..n_pts).map(|_| Vector3::new(rng.random_range(-2.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..9.0))).collect();
    let nd = Normal::new(0.0, pixel_noise).unwrap();
    let mut observations = Vec::new();
    for (ci, p) in poses.iter().enumerate() {
        for (pi, x) in points.iter().enumerate() {
            let Ok(px) = cam.project(&p.transform_point(x)) else { continue };
            if !cam.contains(&px) {
                continue;
            }
            let octave = rng.random_range(0..3u8);
            let n = Vector2::new(nd.sample(&mut rng), nd.sample(&mut rng));
            observations.push(BaObservation { pose: ci, point: pi, pixel: px + n, octave });
        }
    }
    let mut init = BaProblem { poses, fixed: (0..n_cams).map(|i| i == 0).collect(), points, observations };
    for p in init.poses.iter_mut().skip(1) {
        let d: Vec<f64> = (0..6).map(|_| rng.random_range(-perturb..perturb)).collect();
        *p = p.retract(&[d[0], d[1], d[2], d[3] * 0.1, d[4] * 0.1, d[5] * 0.1]);
    }
    for x in init.points.iter_mut() {
        *x += random_vec(&mut rng, perturb);
    }
    (init, cam)
}

/// Map whose keyframes and points follow `problem`.
fn map_from_problem(problem: &BaProblem, cam: &FisheyeCamera) -> Map {
    let mut map = Map::new(MapId(0), 0.0, 15);
    let mut slot = vec![(0usize, 0usize); problem.observations.len()];
    for c in 0..problem.poses.len() {
        let mut keypoints = Vec::new();
        for (oi, o) in problem.observations.iter().enumerate().filter(|(_, o)| o.pose == c) {
            slot[oi] = (c, keypoints.len());
            keypoints.push(KeyPoint { pixel: o.pixel, octave: o.octave, descriptor: Descriptor::basis(keypoints.len() % 128), intensity: 0.2 });
        }
        let frame = Frame::new(c as u64, c as f64, keypoints);
        map.add_keyframe(KeyFrame::from_frame(KeyFrameId(c as u64), &frame, problem.poses[c], MapId(0), cam)).unwrap();
    }
    for (p, x) in problem.points.iter().enumerate() {
        let observations: BTreeMap<KeyFrameId, usize> = problem
            .observations
            .iter()
            .enumerate()
            .filter(|(_, o)| o.point == p)
            .map(|(oi, _)| (KeyFrameId(slot[oi].0 as u64), slot[oi].1))
            .collect();
        if observations.len() < 2 {
            continue;
        }
        let first_kf = *observations.keys().next().unwrap();
        map.add_map_point(MapPoint {
            id: MapPointId(p as u64),
            position: *x,
            descriptor: Descriptor::basis(0),
            observations,
            map_id: MapId(0),
            first_kf,
            created_at_kf_count: 0,
            ref_octave: 0,
            n_visible: 1,
            n_found: 1,
            frames_observed: 2,
        })
        .unwrap();
    }
    map.rebuild_covisibility();
    map
}

fn pose_problem(seed: u64, cam: &FisheyeCamera) -> (SE3Pose, Vec<PoseObservation>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = SE3Pose::new(random_rotation(&mut rng, 3.1), random_vec(&mut rng, 3.0));
    let nd = Normal::new(0.0, 0.8).unwrap();
    let inv = gt.inverse();
    let mut obs = Vec::new();
    while obs.len() < 80 {
        let pc = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-4.0..4.0), rng.random_range(2.0..10.0));
        let Ok(px) = cam.project(&pc) else { continue };
        if !cam.contains(&px) {
            continue;
        }
        // a few gross outliers exercise the robust kernel and re-gating
        let outlier = obs.len() % 10 == 0;
        let off = if outlier { Vector2::new(30.0, -25.0) } else { Vector2::new(nd.sample(&mut rng), nd.sample(&mut rng)) };
        obs.push(PoseObservation { point: inv.transform_point(&pc), pixel: px + off, octave: rng.random_range(0..3) });
    }
    let d: Vec<f64> = (0..6).map(|_| rng.random_range(-0.05..0.05)).collect();
    (gt.retract(&[d[0], d[1], d[2], d[3], d[4], d[5]]), obs)
}

fn sim3_problem(seed: u64, cam: &FisheyeCamera) -> (Sim3Transform, Vec<Sim3Match>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_am = random_sim3(&mut rng);
    let pose_a = SE3Pose::new(random_rotation(&mut rng, 0.3), random_vec(&mut rng, 0.3));
    let pose_m = t_am.transform_camera_pose(&pose_a).compose(&SE3Pose::new(random_rotation(&mut rng, 0.05), random_vec(&mut rng, 0.2)));
    let c_a = pose_a.inverse();
    let nd = Normal::new(0.0, 0.5).unwrap();
    let mut matches = Vec::new();
    while matches.len() < 60 {
        let pc = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(3.0..8.0));
        let xa = c_a.transform_point(&pc);
        let xm = t_am.apply(&xa);
        let (Ok(pa), Ok(pm)) = (cam.project(&pose_a.transform_point(&xa)), cam.project(&pose_m.transform_point(&xm))) else { continue };
        if !cam.contains(&pa) || !cam.contains(&pm) {
            continue;
        }
        let na = Vector2::new(nd.sample(&mut rng), nd.sample(&mut rng));
        let nm = Vector2::new(nd.sample(&mut rng), nd.sample(&mut rng));
        matches.push(Sim3Match { point_a: xa, point_m: xm, pose_a, pixel_a: pa + na, octave_a: 0, pose_m, pixel_m: pm + nm, octave_m: 1 });
    }
    let start = Sim3Transform::new(t_am.scale * 1.03, random_rotation(&mut rng, 0.02) * t_am.rotation, t_am.translation + random_vec(&mut rng, 0.02));
    (start, matches)
}

fn graph_problem(seed: u64) -> (BTreeMap<KeyFrameId, Sim3Transform>, Vec<Sim3Edge>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 16;
    let truth: Vec<Sim3Transform> = (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            let c = Vector3::new(5.0 * a.cos(), 5.0 * a.sin(), 0.3 * (2.0 * a).sin());
            let q = UnitQuaternion::from_euler_angles(0.0, 0.0, a + 1.0);
            SE3Pose::new(q, -(q * c)).to_sim3()
        })
        .collect();
    let noisy = |rng: &mut ChaCha8Rng, s: &Sim3Transform| {
        s.compose(&Sim3Transform::new(1.0 + rng.random_range(-0.01..0.01), random_rotation(rng, 0.01), random_vec(rng, 0.02)))
    };
    let mut edges = Vec::new();
    for i in 0..n {
        let j = (i + 1) % n;
        let kind = if j == 0 { EdgeKind::Loop } else { EdgeKind::SpanningTree };
        let mut e = Sim3Edge::between(KeyFrameId(i as u64), &truth[i], KeyFrameId(j as u64), &truth[j], kind);
        e.measurement = noisy(&mut rng, &e.measurement);
        edges.push(e);
    }
    let nodes = truth
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let f = i as f64 / (n - 1) as f64;
            (KeyFrameId(i as u64), s.compose(&Sim3Transform::new(1.05f64.powf(f), UnitQuaternion::from_euler_angles(0.0, 0.0, 0.05 * f), Vector3::new(0.2 * f, -0.1 * f, 0.0))))
        })
        .collect();
    (nodes, edges)
}

#[test]
fn c04_optimizer_correctness() {
    let cam = default_camera();
    let noise = NoiseModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5000);
    let fd_worst = (0..1000).map(|_| fd_check(&mut rng, &cam)).fold(0.0f64, f64::max);

    let mut failures: Vec<String> = Vec::new();
    for seed in 0..20u64 {
        let (mut p, cam) = ba_problem(6000 + seed, 5, 80, 0.5, 0.05);
        let active = vec![true; p.observations.len()];
        let r = p.solve(&cam, &noise, &BaSettings { max_iterations: 20, ..Default::default() }, &active, None);
        if !monotone(&r.cost_history) || r.final_cost() >= r.cost_history[0] {
            failures.push(format!("ba seed {seed}"));
        }

        let (init, obs) = pose_problem(6100 + seed, &cam);
        let r = pose_only_optimize(&init, &obs, &noise, &cam, &PoseOnlySettings::default()).unwrap();
        if !r.cost_history.iter().all(|c| monotone(c)) {
            failures.push(format!("pose-only seed {seed}"));
        }

        let (start, matches) = sim3_problem(6200 + seed, &cam);
        let r = sim3_refine(&start, &matches, &cam, &noise, &Sim3RefineSettings::default()).unwrap();
        if !r.cost_history.iter().all(|c| monotone(c)) {
            failures.push(format!("sim3 seed {seed}"));
        }

        let (mut nodes, edges) = graph_problem(6300 + seed);
        let fixed: BTreeSet<KeyFrameId> = [KeyFrameId(0)].into_iter().collect();
        let r = optimize_pose_graph(&mut nodes, &edges, &fixed, &GraphSettings::default()).unwrap();
        if !monotone(&r.cost_history) || r.cost_history.last() >= r.cost_history.first() {
            failures.push(format!("pose graph seed {seed}"));
        }

        let (init, cam) = ba_problem(6400 + seed, 5, 80, 0.5, 0.03);
        let mut map = map_from_problem(&init, &cam);
        let r = full_ba(&mut map, &noise, &cam, &BaSettings { max_iterations: 10, ..Default::default() }).unwrap();
        if !r.rounds.iter().all(|round| monotone(&round.cost_history)) {
            failures.push(format!("full ba seed {seed}"));
        }
    }

    let mut gauge_worst = 0.0f64;
    for seed in 0..5u64 {
        let (init, cam) = ba_problem(6500 + seed, 5, 80, 0.5, 0.02);
        let mut rng = ChaCha8Rng::seed_from_u64(6600 + seed);
        let g = Sim3Transform::new(rng.random_range(0.5..2.5), random_rotation(&mut rng, 3.1), random_vec(&mut rng, 5.0));
        let mut a = map_from_problem(&init, &cam);
        let mut b = map_from_problem(&init, &cam);
        b.transform(&g);
        let s = BaSettings { max_iterations: 10, ..Default::default() };
        let ra = full_ba(&mut a, &noise, &cam, &s).unwrap();
        let rb = full_ba(&mut b, &noise, &cam, &s).unwrap();
        assert_eq!(ra.rounds.len(), rb.rounds.len());
        for (x, y) in ra.rounds.iter().zip(&rb.rounds) {
            gauge_worst = gauge_worst.max((x.cost_history[0] - y.cost_history[0]).abs());
            gauge_worst = gauge_worst.max((x.final_cost() - y.final_cost()).abs());
        }
    }

    let ok = fd_worst < 1e-4 && failures.is_empty() && gauge_worst < 1e-9;
    verdict(
        4,
        ok,
        &format!("jacobian rel err {fd_worst:.1e} over 1000 factors; non-monotone runs {:?}; full_ba gauge cost diff {gauge_worst:.1e}", failures),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// shared pipeline helpers

struct Run {
    out: RunOutput,
    stats: RunStats,
    gt: Vec<TrajectoryEntry>,
    path_length: f64,
    n_frames: usize,
}

fn run_scenario(sc: &Scenario, config: PipelineConfig) -> Run {
    let seq = generate_sequence(sc).unwrap();
    let gt = gt_entries(&seq.gt);
    let core = build_core(config, Some(sc.camera), None).unwrap();
    let out = run_sequential(core, seq.input_frames()).unwrap();
    let stats = map_stats(&out.atlas, &out.log);
    Run { stats, gt, path_length: seq.gt.path_length(), n_frames: sc.n_frames(), out }
}

fn trajectory_bytes(r: &Run) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trajectory(&mut buf, &r.out.trajectory).unwrap();
    buf
}

const LONG_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn long_runs() -> &'static Vec<Run> {
    static RUNS: OnceLock<Vec<Run>> = OnceLock::new();
    RUNS.get_or_init(|| LONG_SEEDS.iter().map(|&s| run_scenario(&Scenario::scripted(2000, 3, 2, s), PipelineConfig::default())).collect())
}

// ---------------------------------------------------------------------------
// 5. octave noise model

#[test]
fn c05_affine_noise_model_tracks_longer() {
    let lin = NoiseModel::linear(1.0);
    let aff = NoiseModel::new(2.0, 5.0).unwrap();
    let exact = (0..8).all(|l| sigma(&lin, l).unwrap() == l as f64) && sigma(&aff, 0).unwrap() == 5.0;

    let mut sc = Scenario::clean(400, 21);
    // two pixel deviations at the nominal wall distance
    sc.sensor.deformation_amplitude = 2.0 * sc.sensor.pixel_sigma * sc.scene.radius / sc.camera.fx;
    let track_length = |noise: NoiseModel| {
        let config = PipelineConfig { noise, ..Default::default() };
        run_scenario(&sc, config).stats.largest_map.map(|m| m.obs_per_mp).unwrap_or(0.0)
    };
    let (l_aff, l_lin) = (track_length(aff), track_length(lin));
    let ok = exact && l_aff >= l_lin && l_aff > 0.0;
    verdict(
        5,
        ok,
        &format!(
            "sigma identities {}; amplitude {:.3} mm: mean track length affine {l_aff:.1} vs linear {l_lin:.1}",
            if exact { "exact" } else { "violated" },
            sc.sensor.deformation_amplitude
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 6. exclusion masks

#[test]
fn c06_filtered_keypoints_avoid_exclusion_regions() {
    let mut violations = 0usize;
    let (mut kept, mut dropped) = (0usize, 0usize);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + seed);
        let (w, h) = (rng.random_range(60..160u32), rng.random_range(50..120u32));
        let mut grid = IntensityGrid::filled(w, h, 0.0);
        for v in grid.data.iter_mut() {
            *v = rng.random_range(0.0..0.85);
        }
        for _ in 0..rng.random_range(0..6) {
            let (cx, cy, r) = (rng.random_range(0..w) as i64, rng.random_range(0..h) as i64, rng.random_range(0..4i64));
            for y in (cy - r).max(0)..(cy + r + 1).min(h as i64) {
                for x in (cx - r).max(0)..(cx + r + 1).min(w as i64) {
                    grid.data[(y * w as i64 + x) as usize] = rng.random_range(0.95..1.0);
                }
            }
        }
        let invalid: Option<Vec<bool>> = rng.random_bool(0.3).then(|| {
            let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
            (0..w * h).map(|i| i % w >= x0 && i % w < x0 + 5 && i / w >= y0 && i / w < y0 + 3).collect()
        });
        let threshold = rng.random_range(0.88..0.94);
        let border = rng.random_range(0.0..6.0);
        let dilation = rng.random_range(0.5..4.0);
        let n_octaves = rng.random_range(1..5usize);
        let masks = build_masks(&grid, threshold, border, dilation, n_octaves, invalid.as_deref()).unwrap();

        let keypoints: Vec<KeyPoint> = (0..300)
            .map(|i| KeyPoint {
                pixel: Vector2::new(rng.random_range(-2.0..w as f64 + 2.0), rng.random_range(-2.0..h as f64 + 2.0)),
                octave: rng.random_range(0..n_octaves as u8),
                descriptor: Descriptor::basis(i % 128),
                intensity: 0.5,
            })
            .collect();
        let survivors = filter_keypoints(&keypoints, &masks).unwrap();
        kept += survivors.len();
        dropped += keypoints.len() - survivors.len();

        let seeds: Vec<(i64, i64)> = (0..(w * h) as usize)
            .filter(|&i| grid.data[i] as f64 > threshold || invalid.as_ref().is_some_and(|m| m[i]))
            .map(|i| ((i % w as usize) as i64, (i / w as usize) as i64))
            .collect();
        for kp in &survivors {
            let scale = (1u32 << kp.octave) as f64;
            let (r, b) = (dilation * scale, border * scale);
            let (x, y) = (kp.pixel.x.round(), kp.pixel.y.round());
            let outside = x < 0.0 || y < 0.0 || x >= w as f64 || y >= h as f64;
            let in_border = x < b || y < b || x >= w as f64 - b || y >= h as f64 - b;
            let near = seeds.iter().any(|&(sx, sy)| {
                let (dx, dy) = (x - sx as f64, y - sy as f64);
                dx * dx + dy * dy <= r * r
            });
            if outside || in_border || near {
                violations += 1;
            }
        }
    }
    let ok = violations == 0 && kept > 0 && dropped > 0;
    verdict(6, ok, &format!("{violations} violations over 100 mask sets ({kept} kept, {dropped} removed)"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 7. place recognition on scripted revisits

#[test]
fn c07_merges_are_correct_and_revisits_recovered() {
    const TAIL: usize = 100;
    let t0 = Instant::now();
    let (mut hits, mut merges, mut bad_pairs, mut total_pairs) = (0usize, 0usize, 0usize, 0usize);
    let mut misses = Vec::new();
    for seed in 1..=20u64 {
        let rev = Scenario::scripted(2000, 1, 1, seed).clutter.revisits[0];
        let sc = Scenario::scripted(rev.end + TAIL, 1, 1, seed);
        assert_eq!(sc.clutter.revisits, vec![rev]);
        let r = run_scenario(&sc, PipelineConfig::default());
        for e in &r.out.log.events {
            if let RunEvent::Merge { n_pairs, gt_agree, .. } = e {
                merges += 1;
                total_pairs += n_pairs;
                bad_pairs += n_pairs - gt_agree;
            }
        }
        let h = revisit_hits(&r.out.log, &[(rev.start as u64, rev.end as u64)], TAIL as u64);
        if h == 0 {
            misses.push(seed);
        }
        hits += h;
    }
    let dt = t0.elapsed().as_secs_f64();
    let recall = hits as f64 / 20.0;
    let ok = bad_pairs == 0 && recall >= 0.8 && dt < 300.0;
    verdict(
        7,
        ok,
        &format!(
            "{merges} merges, {bad_pairs}/{total_pairs} pairs disagree with GT; revisit recall {:.0}% (missed seeds {misses:?}); {dt:.0}s",
            100.0 * recall
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 8. end to end

#[test]
fn c08_end_to_end_with_losses_and_revisits() {
    let mut passed = 0;
    let mut lines = Vec::new();
    for (seed, r) in LONG_SEEDS.iter().zip(long_runs()) {
        let g = &r.stats.global;
        let rms = ate(&r.out.trajectory, &r.gt, default_tolerance(&r.gt)).map(|a| a.rms).unwrap_or(f64::INFINITY);
        let ate_pct = 100.0 * rms / r.path_length;
        let one_active = r.out.atlas.active_id().is_some() && r.out.atlas.check_invariants().is_ok();
        let ok = g.coverage_pct >= 80.0 && g.n_maps <= g.n_maps_created - g.n_merges && ate_pct <= 1.0 && one_active;
        passed += ok as usize;
        lines.push(format!(
            "seed {seed}: coverage {:.1}% maps {}/{} created, {} merges, ate {ate_pct:.3}% of {:.0} mm{}",
            g.coverage_pct,
            g.n_maps,
            g.n_maps_created,
            g.n_merges,
            r.path_length,
            if ok { "" } else { " (fail)" }
        ));
    }
    let ok = passed >= 4;
    verdict(8, ok, &format!("{passed}/5 seeds pass [{}]", lines.join("; ")));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 9. determinism

#[test]
fn c09_sequential_runs_are_byte_identical() {
    let first = &long_runs()[0];
    let again = run_scenario(&Scenario::scripted(2000, 3, 2, LONG_SEEDS[0]), PipelineConfig::default());
    let same_traj = trajectory_bytes(first) == trajectory_bytes(&again);
    let same_stats = first.stats.to_json().unwrap() == again.stats.to_json().unwrap();
    let ok = same_traj && same_stats;
    verdict(
        9,
        ok,
        &format!("trajectory {} stats {} over {} frames", if same_traj { "identical" } else { "differs" }, if same_stats { "identical" } else { "differs" }, first.n_frames),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// 10. evaluation invariants

#[test]
fn c10_evaluation_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut worst = 0.0f64;
    let mut exact = true;
    for r in long_runs() {
        let tol = default_tolerance(&r.gt);
        let base = ate(&r.out.trajectory, &r.gt, tol).unwrap().rms;
        for _ in 0..10 {
            let g = random_sim3(&mut rng);
            let moved: Vec<TrajectoryEntry> = r
                .out
                .trajectory
                .iter()
                .map(|e| TrajectoryEntry {
                    timestamp: e.timestamp,
                    pose_wc: SE3Pose::new(g.rotation * e.pose_wc.rotation, g.apply(&e.pose_wc.translation)),
                    map_id: e.map_id,
                })
                .collect();
            worst = worst.max((ate(&moved, &r.gt, tol).unwrap().rms - base).abs());
        }
        let g = &r.stats.global;
        exact &= g.coverage_pct + g.lost_pct == 100.0;
        exact &= g.coverage_pct == atlas_slam::evaluation::coverage(&r.out.log, r.n_frames).unwrap();
    }
    let ok = worst < 1e-9 && exact;
    verdict(10, ok, &format!("rms ate change under random Sim(3) {worst:.1e}; coverage + lost = 100 {}", if exact { "exactly" } else { "violated" }));
    assert!(ok);
}
