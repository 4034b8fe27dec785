use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{ransac, Correspondence2D3D, GeometryError, RansacParams};
use crate::camera::{FisheyeCamera, SE3Pose};
use crate::optim::NoiseModel;

/// Linear resection from ≥ 6 bearing/point pairs: solves `b × (P·X) = 0`
/// for the 3×4 matrix `P`, then snaps its left block to the nearest
/// rotation.
pub fn dlt_resection(matches: &[Correspondence2D3D]) -> Result<SE3Pose, GeometryError> {
    if matches.len() < 6 {
        return Err(GeometryError::InvalidInput(format!("{} matches, 6 required", matches.len())));
    }
    let n = matches.len() as f64;
    let c = matches.iter().map(|m| m.point).sum::<Vector3<f64>>() / n;
    let spread = matches.iter().map(|m| (m.point - c).norm()).sum::<f64>() / n;
    if !(spread > 1e-12) {
        return Err(GeometryError::Degenerate("points coincide".into()));
    }
    let s = 1.0 / spread;
    let mut a = DMatrix::<f64>::zeros(3 * matches.len(), 12);
    for (i, m) in matches.iter().enumerate() {
        let x = (m.point - c) * s;
        let xh = [x.x, x.y, x.z, 1.0];
        let b = m.bearing;
        // rows of the cross-product matrix [b]x
        let cross = [[0.0, -b.z, b.y], [b.z, 0.0, -b.x], [-b.y, b.x, 0.0]];
        for (k, row) in cross.iter().enumerate() {
            for r in 0..3 {
                for col in 0..4 {
                    a[(3 * i + k, 4 * r + col)] = row[r] * xh[col];
                }
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| GeometryError::Degenerate("svd failed".into()))?;
    let sv = &svd.singular_values;
    let (imin, _) = sv.argmin();
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(|x, y| y.total_cmp(x));
    if sorted[10] <= 1e-12 * sorted[0] {
        return Err(GeometryError::Degenerate("resection system rank below 11".into()));
    }
    let p = vt.row(imin);
    let mut m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let mut pt = Vector3::new(p[3], p[7], p[11]);
    if m.determinant() < 0.0 {
        m = -m;
        pt = -pt;
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let scale = svd.singular_values.mean();
    if !(scale > 0.0) {
        return Err(GeometryError::Degenerate("zero resection".into()));
    }
    let r = u * vt;
    if r.determinant() < 0.0 {
        return Err(GeometryError::Degenerate("reflection in resection".into()));
    }
    // undo the point normalization X' = s(X - c)
    let t = pt / (scale * s) - r * c;
    let pose = SE3Pose::from_matrix(&r, t);
    let front = matches
        .iter()
        .filter(|m| m.bearing.dot(&pose.transform_point(&m.point)) > 0.0)
        .count();
    if 2 * front <= matches.len() {
        return Err(GeometryError::Degenerate("points behind the camera".into()));
    }
    Ok(pose)
}

/// Reprojection χ² test with the deviation of the observation's octave.
pub fn reprojection_inlier(
    pose: &SE3Pose,
    m: &Correspondence2D3D,
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    chi2_threshold: f64,
) -> bool {
    match camera.project(&pose.transform_point(&m.point)) {
        Ok(px) => (px - m.pixel).norm_squared() * noise.information(m.octave) < chi2_threshold,
        Err(_) => false,
    }
}

/// 6-point RANSAC resection. `params.inlier_threshold` is the χ² value
/// applied to octave-normalized reprojection errors.
pub fn pnp_ransac(
    matches: &[Correspondence2D3D],
    camera: &FisheyeCamera,
    noise: &NoiseModel,
    params: &RansacParams,
) -> Result<(SE3Pose, Vec<bool>), GeometryError> {
    if matches.len() < 6 {
        return Err(GeometryError::InvalidInput(format!("{} matches, 6 required", matches.len())));
    }
    let thr = params.inlier_threshold;
    let fit = |idx: &[usize]| {
        let s: Vec<_> = idx.iter().map(|&i| matches[i]).collect();
        dlt_resection(&s).ok()
    };
    let out = ransac(matches.len(), 6, params, fit, |p, i| {
        reprojection_inlier(p, &matches[i], camera, noise, thr)
    })?;
    let inl: Vec<_> = (0..matches.len()).filter(|&i| out.inliers[i]).map(|i| matches[i]).collect();
    if let Ok(pose) = dlt_resection(&inl) {
        let mask: Vec<bool> = matches.iter().map(|m| reprojection_inlier(&pose, m, camera, noise, thr)).collect();
        if mask.iter().filter(|&&b| b).count() >= out.n_inliers {
            return Ok((pose, mask));
        }
    }
    Ok((out.model, out.inliers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::CHI2_2DOF_95;
    use nalgebra::{UnitQuaternion, Vector2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn problem(rng: &mut ChaCha8Rng, cam: &FisheyeCamera, n: usize) -> (SE3Pose, Vec<Correspondence2D3D>) {
        let rot = UnitQuaternion::from_euler_angles(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-3.0..3.0));
        let pose = SE3Pose::new(rot, Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
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
    fn exact_resection() {
        let cam = FisheyeCamera::equidistant(300.0, 640, 480);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let (gt, m) = problem(&mut rng, &cam, 30);
            let p = dlt_resection(&m).unwrap();
            assert!(p.rotation.angle_to(&gt.rotation) < 1e-6);
            assert!((p.translation - gt.translation).norm() < 1e-6);
        }
    }

    #[test]
    fn planted_outliers() {
        let cam = FisheyeCamera::equidistant(300.0, 640, 480);
        let noise = NoiseModel::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let (gt, mut m) = problem(&mut rng, &cam, 30);
            for c in m.iter_mut().skip(20) {
                let true_px = c.pixel;
                loop {
                    c.pixel = Vector2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                    if (c.pixel - true_px).norm() > 20.0 * noise.sigma(c.octave) {
                        break;
                    }
                }
                c.bearing = cam.unproject(&c.pixel).unwrap();
            }
            let params = RansacParams { inlier_threshold: CHI2_2DOF_95, min_inliers_accept: 12, max_iterations: 1000, rng_seed: seed, ..Default::default() };
            let (p, mask) = pnp_ransac(&m, &cam, &noise, &params).unwrap();
            let planted: Vec<bool> = (0..30).map(|i| i < 20).collect();
            assert_eq!(mask, planted);
            assert!(p.rotation.angle_to(&gt.rotation) < 1e-6);
        }
    }

    #[test]
    fn too_few_matches() {
        let cam = FisheyeCamera::equidistant(300.0, 640, 480);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (_, m) = problem(&mut rng, &cam, 5);
        assert!(matches!(
            pnp_ransac(&m, &cam, &NoiseModel::default(), &RansacParams::default()),
            Err(GeometryError::InvalidInput(_))
        ));
    }
}
