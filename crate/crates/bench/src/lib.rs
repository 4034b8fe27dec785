//! Seeded fixtures for the solver benchmarks in `benches/`.

use atlas_slam::camera::{FisheyeCamera, SE3Pose, Sim3Transform};
use atlas_slam::geometry::Correspondence2D3D;
use atlas_slam::map::{Descriptor, DESCRIPTOR_LEN};
use atlas_slam::optim::{BaObservation, BaProblem};
use atlas_slam::simulator::default_camera;
use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn point_sets(n: usize, seed: u64) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Sim3Transform::new(1.7, UnitQuaternion::from_euler_angles(0.2, -0.4, 0.9), Vector3::new(3.0, -1.0, 0.5));
    let a: Vec<Vector3<f64>> = (0..n)
        .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
        .collect();
    let b = a.iter().map(|p| g.apply(p)).collect();
    (a, b)
}

/// 2D-3D matches of which the last `n_outliers` carry random pixels.
pub fn pnp_matches(n: usize, n_outliers: usize, seed: u64) -> (FisheyeCamera, Vec<Correspondence2D3D>) {
    let cam = default_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = SE3Pose::new(UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3), Vector3::new(0.3, -0.1, 0.2));
    let inv = pose.inverse();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let pc = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-3.0..3.0), rng.random_range(2.0..8.0));
        let Ok(mut px) = cam.project(&pc) else { continue };
        if !cam.contains(&px) {
            continue;
        }
        if out.len() >= n - n_outliers {
            px = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
        }
        let idx = out.len();
        out.push(Correspondence2D3D {
            pixel: px,
            bearing: cam.unproject(&px).unwrap_or(pc.normalize()),
            octave: rng.random_range(0..4),
            point: inv.transform_point(&pc),
            index_2d: idx,
            index_3d: idx,
        });
    }
    (cam, out)
}

/// Cameras on a short arc over a point cloud, with perturbed poses and points.
pub fn ba_problem(n_cams: usize, n_pts: usize, seed: u64) -> (FisheyeCamera, BaProblem) {
    let cam = default_camera();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses: Vec<SE3Pose> = (0..n_cams)
        .map(|i| {
            let c = Vector3::new(0.3 * i as f64, 0.05 * (i as f64).sin(), 0.0);
            let q = UnitQuaternion::from_euler_angles(0.0, -0.02 * i as f64, 0.0);
            SE3Pose::new(q, -(q * c))
        })
        .collect();
    let points: Vec<Vector3<f64>> = (0..n_pts)
        .map(|_| Vector3::new(rng.random_range(-2.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..9.0)))
        .collect();
    let mut observations = Vec::new();
    for (ci, p) in poses.iter().enumerate() {
        for (pi, x) in points.iter().enumerate() {
            let Ok(px) = cam.project(&p.transform_point(x)) else { continue };
            if cam.contains(&px) {
                let noise = Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                observations.push(BaObservation { pose: ci, point: pi, pixel: px + noise, octave: 0 });
            }
        }
    }
    let mut problem = BaProblem { poses, fixed: (0..n_cams).map(|i| i == 0).collect(), points, observations };
    for p in problem.poses.iter_mut().skip(1) {
        *p = p.retract(&[0.02, -0.01, 0.01, 0.002, -0.001, 0.001]);
    }
    for x in problem.points.iter_mut() {
        *x += Vector3::new(rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03), rng.random_range(-0.03..0.03));
    }
    (cam, problem)
}

/// Random sparse unit descriptors.
pub fn descriptors(n: usize, seed: u64) -> Vec<Descriptor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut d = [0.0; DESCRIPTOR_LEN];
            for v in d.iter_mut() {
                if rng.random_bool(0.3) {
                    *v = rng.random_range(0.0..1.0);
                }
            }
            d[rng.random_range(0..DESCRIPTOR_LEN)] += 1.0;
            Descriptor::normalized(d).unwrap()
        })
        .collect()
}

/// `a` with small perturbations, shuffled by a fixed stride.
pub fn perturbed(a: &[Descriptor], seed: u64) -> Vec<Descriptor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = a.len();
    (0..n)
        .map(|i| {
            let src = a[(i * 7) % n].values();
            let mut d = [0.0; DESCRIPTOR_LEN];
            for (o, s) in d.iter_mut().zip(src) {
                *o = (s + rng.random_range(-0.02..0.02)).max(0.0);
            }
            Descriptor::normalized(d).unwrap()
        })
        .collect()
}
