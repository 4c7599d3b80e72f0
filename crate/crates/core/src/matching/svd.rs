use nalgebra::{Matrix3, Vector3};

use super::Correspondence;
use crate::error::{Error, Result};
use crate::geometry::Pose;

/// Least-squares rigid transform `T` minimizing `sum |T src_i - dst_i|^2`
/// (Kabsch with reflection correction).
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Pose> {
    if src.len() != dst.len() {
        return Err(Error::param("point sets differ in length"));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateCorrespondences(format!(
            "{} pairs, need at least 3",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let cs: Vector3<f64> = src.iter().sum::<Vector3<f64>>() / n;
    let cd: Vector3<f64> = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in src.iter().zip(dst) {
        h += (p - cs) * (q - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s = order.map(|i| svd.singular_values[i]);
    let spread = src
        .iter()
        .map(|p| (p - cs).norm_squared())
        .chain(dst.iter().map(|q| (q - cd).norm_squared()))
        .fold(0.0, f64::max);
    if !(s[0] > 1e-12 * spread.max(1e-300)) || s[1] <= 1e-9 * s[0] {
        return Err(Error::DegenerateCorrespondences(
            "cross-covariance has rank below 2 (coincident or collinear points)".into(),
        ));
    }
    let v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        // flip the direction of the smallest singular value
        let k = order[2];
        let mut d = Matrix3::identity();
        d[(k, k)] = -1.0;
        r = v * d * u.transpose();
    }
    let t = cd - r * cs;
    Pose::from_matrix(&r, t)
}

/// Rigid transform mapping correspondence sources onto their targets.
pub fn svd_align(pairs: &[Correspondence]) -> Result<Pose> {
    let src: Vec<_> = pairs.iter().map(|c| c.source).collect();
    let dst: Vec<_> = pairs.iter().map(|c| c.target).collect();
    kabsch(&src, &dst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect()
    }

    fn cost(t: &Pose, src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> f64 {
        src.iter().zip(dst).map(|(p, q)| (t.transform_point(p) - q).norm_squared()).sum()
    }

    #[test]
    fn identity_and_planted_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_points(20, &mut rng);
        let id = kabsch(&p, &p).unwrap();
        assert!(id.rotation_angle() < 1e-10 && id.translation_norm() < 1e-10);

        let t = Pose::from_axis_angle(&Vector3::z(), 30f64.to_radians(), Vector3::new(1.0, -2.0, 0.5));
        let q: Vec<_> = p.iter().map(|x| t.transform_point(x)).collect();
        let est = kabsch(&p, &q).unwrap();
        let err = t.between(&est);
        assert!(err.rotation_angle() < 1e-8 && err.translation_norm() < 1e-8);
    }

    #[test]
    fn collinear_and_short_inputs_fail() {
        let line: Vec<_> = (0..10).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
        assert!(matches!(kabsch(&line, &line), Err(Error::DegenerateCorrespondences(_))));
        let two = vec![Vector3::zeros(), Vector3::x()];
        assert!(matches!(kabsch(&two, &two), Err(Error::DegenerateCorrespondences(_))));
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 5];
        assert!(kabsch(&same, &same).is_err());
    }

    #[test]
    fn planar_points_with_reflection_risk() {
        // coplanar points: the reflection case must be corrected
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<_> = (0..30).map(|_| Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), 0.0)).collect();
        let t = Pose::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 2.5, Vector3::new(0.0, 3.0, 1.0));
        let q: Vec<_> = p.iter().map(|x| t.transform_point(x)).collect();
        let est = kabsch(&p, &q).unwrap();
        assert!(est.rotation_matrix().determinant() > 0.0);
        assert!(t.between(&est).rotation_angle() < 1e-8);
    }

    #[test]
    fn equivariant_under_source_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_points(15, &mut rng);
        let q: Vec<_> = random_points(15, &mut rng).iter().zip(&p).map(|(n, x)| x + 0.1 * n).collect();
        let a = Pose::from_axis_angle(&Vector3::new(0.2, -1.0, 0.4), 1.3, Vector3::new(2.0, 0.0, -3.0));
        let ap: Vec<_> = p.iter().map(|x| a.transform_point(x)).collect();
        let t1 = kabsch(&ap, &q).unwrap();
        let t0 = kabsch(&p, &q).unwrap();
        let err = (t1 * a).between(&t0);
        assert!(err.rotation_angle() < 1e-8 && err.translation_norm() < 1e-8);
    }

    #[test]
    fn beats_grid_search_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let p = random_points(5, &mut rng);
            let q: Vec<_> = random_points(5, &mut rng);
            let est = kabsch(&p, &q).unwrap();
            let best = cost(&est, &p, &q);
            // coarse grid over rotation vectors; translation is optimal in
            // closed form for each rotation (centroid alignment)
            let cs: Vector3<f64> = p.iter().sum::<Vector3<f64>>() / 5.0;
            let cd: Vector3<f64> = q.iter().sum::<Vector3<f64>>() / 5.0;
            let mut grid_best = f64::INFINITY;
            let steps = 12;
            for a in 0..=steps {
                for b in 0..=steps {
                    for c in 0..=steps {
                        let w = Vector3::new(a as f64, b as f64, c as f64) / steps as f64 * 2.0 * std::f64::consts::PI
                            - Vector3::repeat(std::f64::consts::PI);
                        if w.norm() > std::f64::consts::PI {
                            continue;
                        }
                        let r = nalgebra::Rotation3::new(w);
                        let t = Pose::from_matrix(r.matrix(), cd - r * cs).unwrap();
                        grid_best = grid_best.min(cost(&t, &p, &q));
                    }
                }
            }
            assert!(best <= grid_best + 1e-9);
        }
    }
}
