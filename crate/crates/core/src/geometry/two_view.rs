use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};

use super::{ransac, triangulate_with, Correspondence2D2D, GeometryError, RansacParams};
use crate::camera::SE3Pose;

/// Relative motion recovered from an essential matrix.
#[derive(Clone, Debug)]
pub struct TwoViewMotion {
    /// Second camera from first camera; unit-length translation.
    pub pose: SE3Pose,
    /// Triangulated points in the first camera frame (`None` where the
    /// candidate failed cheirality or triangulation).
    pub points: Vec<Option<Vector3<f64>>>,
    pub inliers: Vec<bool>,
    /// Cheirality support of the four candidate decompositions.
    pub counts: [usize; 4],
}

/// Translation to the centroid and isotropic scaling to mean distance √2.
fn hartley(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector2<f64>>() / n;
    let mean = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 1e-15 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Normalized 8-point estimate of `F` with `x2ᵀ·F·x1 = 0`, rank 2 and unit
/// Frobenius norm. Inputs are `(x1, x2)` pairs of normalized image
/// coordinates.
pub fn eight_point_fundamental(corrs: &[(Vector2<f64>, Vector2<f64>)]) -> Result<Matrix3<f64>, GeometryError> {
    if corrs.len() < 8 {
        return Err(GeometryError::InvalidInput(format!("{} correspondences, 8 required", corrs.len())));
    }
    if corrs.iter().any(|(a, b)| !(a.iter().chain(b.iter()).all(|v| v.is_finite()))) {
        return Err(GeometryError::InvalidInput("non-finite coordinate".into()));
    }
    let x1: Vec<_> = corrs.iter().map(|c| c.0).collect();
    let x2: Vec<_> = corrs.iter().map(|c| c.1).collect();
    let (t1, t2) = (hartley(&x1), hartley(&x2));
    let rows = corrs.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in x1.iter().zip(&x2).enumerate() {
        let p = t1 * Vector3::new(p.x, p.y, 1.0);
        let q = t2 * Vector3::new(q.x, q.y, 1.0);
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = q[r] * p[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or_else(|| GeometryError::Degenerate("svd failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    if sv[order[7]] <= 1e-10 * sv[order[0]] {
        return Err(GeometryError::Degenerate("design matrix rank below 8".into()));
    }
    let f = vt.row(order[8]);
    let fh = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let svd = fh.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = svd.singular_values;
    let imin = s.imin();
    s[imin] = 0.0;
    let f2 = u * Matrix3::from_diagonal(&s) * vt;
    let f = t2.transpose() * f2 * t1;
    let n = f.norm();
    if !(n > 0.0) {
        return Err(GeometryError::Degenerate("zero fundamental matrix".into()));
    }
    Ok(f / n)
}

/// Squared Sampson distance of a correspondence to `F`.
pub fn sampson_error(f: &Matrix3<f64>, x1: &Vector2<f64>, x2: &Vector2<f64>) -> f64 {
    let p = Vector3::new(x1.x, x1.y, 1.0);
    let q = Vector3::new(x2.x, x2.y, 1.0);
    let fp = f * p;
    let ftq = f.transpose() * q;
    let e = q.dot(&fp);
    let den = fp.x * fp.x + fp.y * fp.y + ftq.x * ftq.x + ftq.y * ftq.y;
    if den <= 0.0 {
        f64::INFINITY
    } else {
        e * e / den
    }
}

/// 8-point RANSAC; inliers have squared Sampson distance below the
/// threshold (normalized image units squared).
pub fn ransac_fundamental(
    corrs: &[(Vector2<f64>, Vector2<f64>)],
    params: &RansacParams,
) -> Result<(Matrix3<f64>, Vec<bool>), GeometryError> {
    if corrs.len() < 8 {
        return Err(GeometryError::InvalidInput(format!("{} correspondences, 8 required", corrs.len())));
    }
    let thr = params.inlier_threshold;
    let fit = |idx: &[usize]| {
        let s: Vec<_> = idx.iter().map(|&i| corrs[i]).collect();
        eight_point_fundamental(&s).ok()
    };
    let out = ransac(corrs.len(), 8, params, fit, |f, i| sampson_error(f, &corrs[i].0, &corrs[i].1) < thr)?;
    let inl: Vec<_> = (0..corrs.len()).filter(|&i| out.inliers[i]).map(|i| corrs[i]).collect();
    if let Ok(f) = eight_point_fundamental(&inl) {
        let mask: Vec<bool> = corrs.iter().map(|c| sampson_error(&f, &c.0, &c.1) < thr).collect();
        if mask.iter().filter(|&&b| b).count() >= out.n_inliers {
            return Ok((f, mask));
        }
    }
    Ok((out.model, out.inliers))
}

/// Projects onto the essential manifold (two equal singular values, one
/// zero). With normalized coordinates `E = F` up to this projection.
pub fn essential_from_fundamental(f: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = f.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let s = svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut d = Vector3::zeros();
    let m = 0.5 * (s[idx[0]] + s[idx[1]]);
    d[idx[0]] = m;
    d[idx[1]] = m;
    let e = u * Matrix3::from_diagonal(&d) * vt;
    e / e.norm()
}

/// Index of the largest count; the first wins ties.
pub fn select_motion(counts: &[usize; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if counts[i] > counts[best] {
            best = i;
        }
    }
    best
}

fn decompose(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut vt = svd.v_t.unwrap();
    // order singular values decreasingly so the null direction is the last column
    let s = svd.singular_values;
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    u = Matrix3::from_columns(&[u.column(idx[0]), u.column(idx[1]), u.column(idx[2])]);
    vt = Matrix3::from_rows(&[vt.row(idx[0]), vt.row(idx[1]), vt.row(idx[2])]);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t: Vector3<f64> = u.column(2).into_owned().normalize();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

/// Chooses among the four decompositions of `E` the one placing most
/// triangulated correspondences in front of both cameras.
pub fn motion_from_essential(e: &Matrix3<f64>, corrs: &[Correspondence2D2D]) -> Result<TwoViewMotion, GeometryError> {
    if corrs.is_empty() {
        return Err(GeometryError::InvalidInput("no correspondences".into()));
    }
    let id = SE3Pose::identity();
    let mut counts = [0usize; 4];
    let mut results: Vec<Vec<Option<Vector3<f64>>>> = Vec::with_capacity(4);
    let cands = decompose(e);
    for (k, (r, t)) in cands.iter().enumerate() {
        let pose = SE3Pose::from_matrix(r, *t);
        let pts: Vec<Option<Vector3<f64>>> = corrs
            .iter()
            .map(|c| {
                let tri = triangulate_with(&id, &pose, &c.ray_1, &c.ray_2, 0.0).ok()?;
                tri.in_front().then_some(tri.point)
            })
            .collect();
        counts[k] = pts.iter().filter(|p| p.is_some()).count();
        results.push(pts);
    }
    let best = select_motion(&counts);
    if 2 * counts[best] <= corrs.len() {
        return Err(GeometryError::AmbiguousMotion { best: counts[best], total: corrs.len() });
    }
    let (r, t) = cands[best];
    let points = results.swap_remove(best);
    let inliers = points.iter().map(|p| p.is_some()).collect();
    Ok(TwoViewMotion { pose: SE3Pose::from_matrix(&r, t), points, inliers, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Scene {
        rel: SE3Pose,
        corrs: Vec<Correspondence2D2D>,
    }

    fn scene(rng: &mut ChaCha8Rng, n: usize) -> Scene {
        let rot = UnitQuaternion::from_euler_angles(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)).normalize();
        let rel = SE3Pose::new(rot, t);
        let corrs = (0..n)
            .map(|i| {
                let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(4.0..10.0));
                let mut c = Correspondence2D2D::new(x.normalize(), rel.transform_point(&x).normalize());
                c.index_1 = i;
                c.index_2 = i;
                c
            })
            .collect();
        Scene { rel, corrs }
    }

    fn norm_pairs(c: &[Correspondence2D2D]) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        c.iter().map(|c| c.normalized().unwrap()).collect()
    }

    #[test]
    fn noiseless_epipolar_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = scene(&mut rng, 50);
            let pairs = norm_pairs(&s.corrs);
            let f = eight_point_fundamental(&pairs).unwrap();
            assert!((f.norm() - 1.0).abs() < 1e-12);
            assert!(f.determinant().abs() < 1e-12);
            for (p, q) in &pairs {
                let r = Vector3::new(q.x, q.y, 1.0).dot(&(f * Vector3::new(p.x, p.y, 1.0)));
                assert!(r.abs() < 1e-10, "{r}");
            }
        }
    }

    #[test]
    fn duplicated_points_degenerate() {
        let p = (Vector2::new(0.1, 0.2), Vector2::new(0.15, 0.2));
        let pairs = vec![p; 10];
        assert!(matches!(eight_point_fundamental(&pairs), Err(GeometryError::Degenerate(_))));
        assert!(matches!(eight_point_fundamental(&pairs[..5]), Err(GeometryError::InvalidInput(_))));
    }

    #[test]
    fn pure_rotation_is_caught() {
        // With zero baseline the relative pose has no translation; the
        // estimated motion triangulates at near-zero parallax.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rot = UnitQuaternion::from_euler_angles(0.05, -0.03, 0.02);
        let corrs: Vec<_> = (0..40)
            .map(|_| {
                let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(4.0..10.0));
                Correspondence2D2D::new(x.normalize(), (rot * x).normalize())
            })
            .collect();
        match eight_point_fundamental(&norm_pairs(&corrs)) {
            Err(GeometryError::Degenerate(_)) => {}
            Ok(f) => {
                let e = essential_from_fundamental(&f);
                if let Ok(m) = motion_from_essential(&e, &corrs) {
                    let pts: Vec<_> = m.points.iter().flatten().copied().collect();
                    if !pts.is_empty() {
                        let par = super::super::mean_parallax(&pts, &SE3Pose::identity(), &m.pose).unwrap();
                        assert!(par < 1.0, "parallax {par}");
                    }
                }
            }
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn recovers_relative_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let s = scene(&mut rng, 60);
            let f = eight_point_fundamental(&norm_pairs(&s.corrs)).unwrap();
            let e = essential_from_fundamental(&f);
            let m = motion_from_essential(&e, &s.corrs).unwrap();
            assert!(m.pose.rotation.angle_to(&s.rel.rotation) < 1e-6);
            let terr = m.pose.translation.normalize().dot(&s.rel.translation.normalize()).clamp(-1.0, 1.0).acos();
            assert!(terr < 1e-6, "{terr}");
            assert!(m.inliers.iter().all(|&b| b));
        }
    }

    #[test]
    fn ambiguous_when_cheirality_is_split() {
        // Half of the rays are reflected through the first camera center,
        // so no decomposition explains more than half of them.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = scene(&mut rng, 40);
        let e = essential_from_fundamental(&eight_point_fundamental(&norm_pairs(&s.corrs)).unwrap());
        let mixed: Vec<_> = s
            .corrs
            .iter()
            .enumerate()
            .map(|(i, c)| if i % 2 == 0 { *c } else { Correspondence2D2D::new(-c.ray_1, c.ray_2) })
            .collect();
        assert!(matches!(motion_from_essential(&e, &mixed), Err(GeometryError::AmbiguousMotion { .. })));
    }

    #[test]
    fn argmax_rule() {
        assert_eq!(select_motion(&[95, 3, 1, 1]), 0);
        assert_eq!(select_motion(&[1, 3, 95, 1]), 2);
        assert_eq!(select_motion(&[4, 4, 4, 4]), 0);
    }

    #[test]
    fn ransac_rejects_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = scene(&mut rng, 80);
        let mut pairs = norm_pairs(&s.corrs);
        for p in pairs.iter_mut().skip(60) {
            p.1 = Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        }
        let params = RansacParams { inlier_threshold: 1e-8, min_inliers_accept: 30, max_iterations: 2000, ..Default::default() };
        let (_, mask) = ransac_fundamental(&pairs, &params).unwrap();
        assert!(mask[..60].iter().all(|&b| b));
        assert!(mask[60..].iter().filter(|&&b| b).count() <= 1);
    }
}
