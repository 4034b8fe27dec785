use nalgebra::{Matrix3, Matrix4, Quaternion, SymmetricEigen, UnitQuaternion, Vector3, Vector4};

use super::{check_finite3, ransac, Correspondence3D3D, GeometryError, RansacParams};
use crate::camera::Sim3Transform;

/// Closed-form similarity `b ≈ s·R·a + t` in the least-squares sense
/// (unit-quaternion absolute orientation).
pub fn horn_sim3(pts_a: &[Vector3<f64>], pts_b: &[Vector3<f64>]) -> Result<Sim3Transform, GeometryError> {
    if pts_a.len() != pts_b.len() {
        return Err(GeometryError::InvalidInput("point sets differ in length".into()));
    }
    if pts_a.len() < 3 {
        return Err(GeometryError::InvalidInput(format!("{} points, 3 required", pts_a.len())));
    }
    for p in pts_a.iter().chain(pts_b) {
        check_finite3(p)?;
    }
    let n = pts_a.len() as f64;
    let ca = pts_a.iter().sum::<Vector3<f64>>() / n;
    let cb = pts_b.iter().sum::<Vector3<f64>>() / n;
    let mut s = Matrix3::zeros();
    let mut cov_a = Matrix3::zeros();
    let mut norm_a = 0.0;
    for (a, b) in pts_a.iter().zip(pts_b) {
        let (da, db) = (a - ca, b - cb);
        s += da * db.transpose();
        cov_a += da * da.transpose();
        norm_a += da.norm_squared();
    }
    let ev = SymmetricEigen::new(cov_a).eigenvalues;
    let mut sorted = [ev[0], ev[1], ev[2]];
    sorted.sort_by(|x, y| y.total_cmp(x));
    if sorted[0] <= 0.0 || sorted[1] <= 1e-12 * sorted[0] {
        return Err(GeometryError::Degenerate("source points are collinear".into()));
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,       -sxx + syy - szz,  syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,       -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(nmat);
    let imax = eig.eigenvalues.imax();
    let v: Vector4<f64> = eig.eigenvectors.column(imax).into_owned();
    let q = UnitQuaternion::from_quaternion(Quaternion::new(v[0], v[1], v[2], v[3]));
    let r = q.to_rotation_matrix();
    let num: f64 = pts_a
        .iter()
        .zip(pts_b)
        .map(|(a, b)| (b - cb).dot(&(r * (a - ca))))
        .sum();
    let scale = num / norm_a;
    if !(scale > 1e-12) || !scale.is_finite() {
        return Err(GeometryError::Degenerate(format!("scale {scale}")));
    }
    let t = cb - scale * (r * ca);
    Ok(Sim3Transform::new(scale, q, t))
}

/// `max(‖T·a − b‖ / scale_b, ‖T⁻¹·b − a‖ / scale_a)`.
pub fn sim3_transfer_error(
    t: &Sim3Transform,
    t_inv: &Sim3Transform,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    scale_a: f64,
    scale_b: f64,
) -> f64 {
    let fwd = (t.apply(a) - b).norm() / scale_b;
    let bwd = (t_inv.apply(b) - a).norm() / scale_a;
    fwd.max(bwd)
}

pub fn ransac_sim3(
    matches: &[Correspondence3D3D],
    params: &RansacParams,
) -> Result<(Sim3Transform, Vec<bool>), GeometryError> {
    ransac_sim3_normalized(matches, params, 1.0, 1.0)
}

/// Sim(3) RANSAC with transfer errors divided by a characteristic length of
/// each point set (e.g. median scene depth), so the threshold is
/// scale-free.
pub fn ransac_sim3_normalized(
    matches: &[Correspondence3D3D],
    params: &RansacParams,
    scale_a: f64,
    scale_b: f64,
) -> Result<(Sim3Transform, Vec<bool>), GeometryError> {
    if matches.len() < 3 {
        return Err(GeometryError::InvalidInput(format!("{} matches, 3 required", matches.len())));
    }
    if !(scale_a > 0.0 && scale_b > 0.0) {
        return Err(GeometryError::InvalidInput("normalization scales must be positive".into()));
    }
    let thr = params.inlier_threshold;
    let model_of = |idx: &[usize]| -> Option<(Sim3Transform, Sim3Transform)> {
        let a: Vec<_> = idx.iter().map(|&i| matches[i].a).collect();
        let b: Vec<_> = idx.iter().map(|&i| matches[i].b).collect();
        let t = horn_sim3(&a, &b).ok()?;
        let inv = t.inverse();
        Some((t, inv))
    };
    let inlier = |m: &(Sim3Transform, Sim3Transform), i: usize| {
        sim3_transfer_error(&m.0, &m.1, &matches[i].a, &matches[i].b, scale_a, scale_b) < thr
    };
    let out = ransac(matches.len(), 3, params, model_of, inlier)?;
    let idx: Vec<usize> = (0..matches.len()).filter(|&i| out.inliers[i]).collect();
    if let Some(refit) = model_of(&idx) {
        let mask: Vec<bool> = (0..matches.len()).map(|i| inlier(&refit, i)).collect();
        if mask.iter().filter(|&&b| b).count() >= out.n_inliers {
            return Ok((refit.0, mask));
        }
    }
    Ok((out.model.0, out.inliers))
}
