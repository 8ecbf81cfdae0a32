//! Joint-error metrics and rank correlation.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

fn check_pair(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::InvalidInput(format!(
            "joint sets differ in size or are empty: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean distance between corresponding joints.
pub fn mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum::<f64>() / pred.len() as f64)
}

/// Optimal similarity transform `(scale, rotation, translation)` mapping `src` onto `dst`.
pub fn similarity_alignment(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
) -> Result<(f64, Matrix3<f64>, Vector3<f64>)> {
    check_pair(src, dst)?;
    if src.len() < 3 {
        return Err(Error::AlignmentDegenerate);
    }
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    let mut var_d = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - mu_s, d - mu_d);
        cov += b * a.transpose();
        var_s += a.norm_squared();
        var_d += b.norm_squared();
    }
    let scale_ref = var_s.max(var_d).max(f64::MIN_POSITIVE);
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sv = svd.singular_values;
    // Procrustes is unique only when the cross-covariance has rank >= 2.
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if var_s <= 1e-12 * scale_ref || sorted[1] <= 1e-12 * scale_ref {
        return Err(Error::AlignmentDegenerate);
    }
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        // flip the axis of the smallest singular value
        let k = (0..3).min_by(|&a, &b| sv[a].total_cmp(&sv[b])).expect("three values");
        d[(k, k)] = -1.0;
        sv[k] = -sv[k];
    }
    let rotation = u * d * v_t;
    let scale = sv.sum() / var_s;
    let translation = mu_d - scale * rotation * mu_s;
    Ok((scale, rotation, translation))
}

/// [`mpjpe`] after similarity alignment of `pred` onto `gt`.
///
/// The least-squares alignment and the identity are both candidates, so the
/// result never exceeds the unaligned error.
pub fn pa_mpjpe(pred: &[Vector3<f64>], gt: &[Vector3<f64>]) -> Result<f64> {
    let (s, r, t) = similarity_alignment(pred, gt)?;
    let aligned: Vec<Vector3<f64>> = pred.iter().map(|p| s * r * p + t).collect();
    Ok(mpjpe(&aligned, gt)?.min(mpjpe(pred, gt)?))
}

/// Average ranks with ties sharing the mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedCorrelation);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation of two equal-length samples.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "correlation needs two equal samples of at least 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("correlation input is not finite".into()));
    }
    pearson(&ranks(a), &ranks(b))
}

/// Rank correlation between per-task mean final sigma and per-task error.
pub fn uncertainty_correlation(mean_sigmas: &[f64], errors: &[f64]) -> Result<f64> {
    if mean_sigmas.len() < 10 {
        return Err(Error::InvalidInput(format!(
            "uncertainty correlation needs at least 10 records, got {}",
            mean_sigmas.len()
        )));
    }
    spearman(mean_sigmas, errors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn cloud(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)))
            .collect()
    }

    fn random_rotation(r: &mut rng::Rng) -> Matrix3<f64> {
        let axis = Vector3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
        *Rotation3::from_axis_angle(&Unit::new_normalize(axis), r.gen_range(-3.0..3.0)).matrix()
    }

    #[test]
    fn mpjpe_examples() {
        let gt = cloud(1, 24);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<_> = gt.iter().map(|p| p + Vector3::x()).collect();
        assert_relative_eq!(mpjpe(&shifted, &gt).unwrap(), 1.0, epsilon = 1e-15);
        let pred = cloud(2, 24);
        let mut oracle = 0.0;
        for (p, g) in pred.iter().zip(&gt) {
            let d = [p.x - g.x, p.y - g.y, p.z - g.z];
            oracle += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        }
        assert_relative_eq!(mpjpe(&pred, &gt).unwrap(), oracle / 24.0, epsilon = 1e-14);
        assert!(mpjpe(&pred[..3], &gt).is_err());
    }

    #[test]
    fn pa_mpjpe_vanishes_on_similar_copies() {
        let mut r = rng::seeded(3);
        for seed in 0..20 {
            let gt = cloud(100 + seed, 24);
            let rot = random_rotation(&mut r);
            let s = r.gen_range(0.2..5.0);
            let t = Vector3::new(r.gen_range(-9.0..9.0), r.gen_range(-9.0..9.0), r.gen_range(-9.0..9.0));
            let pred: Vec<_> = gt.iter().map(|p| s * rot * p + t).collect();
            assert!(pa_mpjpe(&pred, &gt).unwrap() < 1e-10);
        }
    }

    #[test]
    fn alignment_handles_reflection_case() {
        let gt = cloud(5, 24);
        let mirrored: Vec<_> = gt.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let (_, rot, _) = similarity_alignment(&mirrored, &gt).unwrap();
        assert_relative_eq!(rot.determinant(), 1.0, epsilon = 1e-12);
        assert!(pa_mpjpe(&mirrored, &gt).unwrap() <= mpjpe(&mirrored, &gt).unwrap());
    }

    #[test]
    fn degenerate_alignment_is_reported() {
        let gt = cloud(6, 5);
        let collapsed = vec![Vector3::new(1.0, 2.0, 3.0); 5];
        assert!(matches!(pa_mpjpe(&collapsed, &gt), Err(Error::AlignmentDegenerate)));
        let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(pa_mpjpe(&line, &gt), Err(Error::AlignmentDegenerate)));
        assert!(matches!(pa_mpjpe(&gt[..2], &gt[..2]), Err(Error::AlignmentDegenerate)));
    }

    fn aligned_error(pred: &[Vector3<f64>], gt: &[Vector3<f64>], s: f64, rot: &Matrix3<f64>) -> f64 {
        // translation chosen optimally for the mean error is not closed form; use centroid matching
        let n = pred.len() as f64;
        let cp = pred.iter().sum::<Vector3<f64>>() / n;
        let cg = gt.iter().sum::<Vector3<f64>>() / n;
        let t = cg - s * rot * cp;
        pred.iter().zip(gt).map(|(p, g)| (s * rot * p + t - g).norm_squared()).sum()
    }

    #[test]
    fn alignment_matches_brute_force_search() {
        let gt = cloud(7, 12);
        let mut r = rng::seeded(8);
        let rot0 = random_rotation(&mut r);
        let pred: Vec<_> = gt
            .iter()
            .map(|p| 1.7 * rot0 * p + Vector3::new(r.gen_range(-0.3..0.3), r.gen_range(-0.3..0.3), 0.4))
            .collect();
        // dense rotation grid, then coordinate refinement of axis-angle and scale
        let mut best = (f64::INFINITY, Vector3::zeros(), 1.0);
        let steps = 16;
        for i in 0..steps {
            for j in 0..steps {
                for k in 0..steps {
                    let w = Vector3::new(i as f64, j as f64, k as f64) * (2.0 * std::f64::consts::PI / steps as f64)
                        - Vector3::repeat(std::f64::consts::PI);
                    let rot = *Rotation3::new(w).matrix();
                    for s in [0.4, 0.5, 0.6, 0.7, 0.8] {
                        let e = aligned_error(&pred, &gt, s, &rot);
                        if e < best.0 {
                            best = (e, w, s);
                        }
                    }
                }
            }
        }
        let mut h = 0.1;
        while h > 1e-10 {
            let mut improved = false;
            for c in 0..4 {
                for sign in [-1.0, 1.0] {
                    let (mut w, mut s) = (best.1, best.2);
                    if c < 3 {
                        w[c] += sign * h;
                    } else {
                        s += sign * h;
                    }
                    let e = aligned_error(&pred, &gt, s, Rotation3::new(w).matrix());
                    if e < best.0 {
                        best = (e, w, s);
                        improved = true;
                    }
                }
            }
            if !improved {
                h *= 0.5;
            }
        }
        let (s, rot, t) = similarity_alignment(&pred, &gt).unwrap();
        let closed: f64 = pred.iter().zip(&gt).map(|(p, g)| (s * rot * p + t - g).norm_squared()).sum();
        assert!((closed - best.0).abs() < 1e-8 * (1.0 + best.0), "{closed} vs {}", best.0);
        assert_relative_eq!(s, best.2, epsilon = 1e-5);
    }

    proptest! {
        #[test]
        fn pa_never_exceeds_plain(seed in 0u64..10_000) {
            let gt = cloud(seed, 24);
            let pred = cloud(seed + 1, 24);
            prop_assert!(pa_mpjpe(&pred, &gt).unwrap() <= mpjpe(&pred, &gt).unwrap() + 1e-12);
        }
    }

    #[test]
    fn spearman_examples() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64).powi(3)).collect();
        let b: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_relative_eq!(spearman(&a, &b).unwrap(), 1.0, epsilon = 1e-15);
        let rev: Vec<f64> = b.iter().rev().copied().collect();
        assert_relative_eq!(spearman(&a, &rev).unwrap(), -1.0, epsilon = 1e-15);
        assert!(matches!(spearman(&[1.0; 12], &b[..12]), Err(Error::UndefinedCorrelation)));
        assert!(uncertainty_correlation(&a[..9], &b[..9]).is_err());
    }

    #[test]
    fn spearman_ties_use_mean_rank() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_null_distribution() {
        let mut r = rng::seeded(11);
        let a: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let mut b = a.clone();
        b.shuffle(&mut r);
        assert!(spearman(&a, &b).unwrap().abs() < 0.1);
    }
}
