use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::{PointCloud, SpatialIndex};
use crate::error::{Error, Result};

/// Eigenvalue floor used by plane-regularized GICP covariances.
pub const PLANE_EPSILON: f64 = 1e-3;

/// Unbiased sample covariance of a point set.
pub fn sample_covariance<'a, I>(points: I) -> Option<Matrix3<f64>>
where
    I: IntoIterator<Item = &'a Vector3<f64>>,
    I::IntoIter: Clone,
{
    let it = points.into_iter();
    let n = it.clone().count();
    if n < 2 {
        return None;
    }
    let mean: Vector3<f64> = it.clone().sum::<Vector3<f64>>() / n as f64;
    let mut cov = Matrix3::zeros();
    for p in it {
        let d = p - mean;
        cov += d * d.transpose();
    }
    Some(cov / (n - 1) as f64)
}

/// Eigenpairs sorted ascending by eigenvalue.
pub fn sorted_eigen(cov: &Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let eig = SymmetricEigen::new(*cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = idx.map(|i| eig.eigenvalues[i]);
    let vectors = idx.map(|i| eig.eigenvectors.column(i).into_owned().normalize());
    (values, vectors)
}

/// Flips `n` so its largest-magnitude component is positive (first such
/// component on ties).
pub fn canonicalize_normal(n: Vector3<f64>) -> Vector3<f64> {
    let mut best = 0;
    for i in 1..3 {
        if n[i].abs() > n[best].abs() {
            best = i;
        }
    }
    if n[best] < 0.0 {
        -n
    } else {
        n
    }
}

/// Covariance of the `k` nearest points to `query` and the surface normal
/// (unit eigenvector of the smallest eigenvalue, canonical sign).
pub fn estimate_covariance_normal(
    cloud: &PointCloud,
    index: &SpatialIndex,
    query: &Vector3<f64>,
    k: usize,
) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if k < 3 {
        return Err(Error::DegenerateNeighborhood(format!("k = {k} < 3")));
    }
    if cloud.len() < k {
        return Err(Error::DegenerateNeighborhood(format!(
            "cloud has {} points, need {k}",
            cloud.len()
        )));
    }
    let neighbors = index.knn(query, k);
    let pts: Vec<&Vector3<f64>> = neighbors.iter().map(|n| &index.points()[n.index]).collect();
    covariance_normal_of(pts.iter().copied())
}

/// Covariance and canonical normal of an explicit neighborhood.
pub fn covariance_normal_of<'a, I>(points: I) -> Result<(Matrix3<f64>, Vector3<f64>)>
where
    I: IntoIterator<Item = &'a Vector3<f64>>,
    I::IntoIter: Clone,
{
    let cov = sample_covariance(points)
        .ok_or_else(|| Error::DegenerateNeighborhood("fewer than two points".into()))?;
    let (values, vectors) = sorted_eigen(&cov);
    let scale = values[2];
    if !(scale > 1e-12) {
        return Err(Error::DegenerateNeighborhood("all neighbors coincide".into()));
    }
    if values[1] <= 1e-9 * scale {
        return Err(Error::DegenerateNeighborhood("neighbors are collinear".into()));
    }
    Ok((cov, canonicalize_normal(vectors[0])))
}

/// Plane-regularized covariances `U diag(eps, 1, 1) U^T` from the `k`
/// nearest neighbors of every point, as used by GICP.
pub fn regularized_covariances(cloud: &PointCloud, k: usize) -> Vec<Matrix3<f64>> {
    let index = SpatialIndex::new(cloud);
    let k = k.max(3).min(cloud.len());
    cloud
        .points()
        .iter()
        .map(|p| {
            let nn = index.knn(p, k);
            let cov = sample_covariance(nn.iter().map(|n| &index.points()[n.index]))
                .unwrap_or_else(Matrix3::identity);
            let (_, v) = sorted_eigen(&cov);
            let d = Vector3::new(PLANE_EPSILON, 1.0, 1.0);
            let mut out = Matrix3::zeros();
            for i in 0..3 {
                out += d[i] * v[i] * v[i].transpose();
            }
            0.5 * (out + out.transpose())
        })
        .collect()
}

/// Returns a copy of `cloud` carrying plane-regularized covariances.
pub fn with_gicp_covariances(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    let covs = regularized_covariances(cloud, k);
    cloud.clone().with_covariances(covs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// Cyclic Jacobi eigen-solver, used as an independent oracle.
    fn jacobi_smallest_eigenvector(m: &Matrix3<f64>) -> Vector3<f64> {
        let mut a = *m;
        let mut v = Matrix3::<f64>::identity();
        for _ in 0..100 {
            for p in 0..3 {
                for q in (p + 1)..3 {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let mut j = Matrix3::<f64>::identity();
                    j[(p, p)] = c;
                    j[(q, q)] = c;
                    j[(p, q)] = s;
                    j[(q, p)] = -s;
                    a = j.transpose() * a * j;
                    v *= j;
                }
            }
        }
        let mut best = 0;
        for i in 1..3 {
            if a[(i, i)] < a[(best, best)] {
                best = i;
            }
        }
        v.column(best).into_owned()
    }

    fn grid_on_plane(u: Vector3<f64>, w: Vector3<f64>) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..4 {
                pts.push(u * (i as f64 - 2.0) * 0.3 + w * (j as f64 - 1.5) * 0.3);
            }
        }
        pts
    }

    #[test]
    fn horizontal_plane() {
        let cloud = PointCloud::new(grid_on_plane(Vector3::x(), Vector3::y())).unwrap();
        let index = SpatialIndex::new(&cloud);
        let (cov, n) = estimate_covariance_normal(&cloud, &index, &Vector3::zeros(), 20).unwrap();
        assert!((n - Vector3::z()).norm() < 1e-12);
        for i in 0..3 {
            assert_eq!(cov[(2, i)], 0.0);
            assert_eq!(cov[(i, 2)], 0.0);
        }
    }

    #[test]
    fn diagonal_plane_normal_is_canonical() {
        // plane x + y = 0
        let u = Vector3::new(1.0, -1.0, 0.0).normalize();
        let cloud = PointCloud::new(grid_on_plane(u, Vector3::z())).unwrap();
        let index = SpatialIndex::new(&cloud);
        let (_, n) = estimate_covariance_normal(&cloud, &index, &Vector3::zeros(), 20).unwrap();
        let expected = Vector3::new(1.0, 1.0, 0.0) / 2f64.sqrt();
        assert!((n - expected).norm() < 1e-9, "{n}");
    }

    #[test]
    fn noisy_plane_matches_jacobi_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.01).unwrap();
        let truth = Vector3::new(0.2, -0.3, 1.0).normalize();
        let u = truth.cross(&Vector3::x()).normalize();
        let w = truth.cross(&u);
        let pts: Vec<_> = (0..20)
            .map(|_| {
                u * rng.gen_range(-1.0..1.0) + w * rng.gen_range(-1.0..1.0) + truth * noise.sample(&mut rng)
            })
            .collect();
        let cloud = PointCloud::new(pts).unwrap();
        let index = SpatialIndex::new(&cloud);
        let (cov, n) = estimate_covariance_normal(&cloud, &index, &Vector3::zeros(), 20).unwrap();
        let oracle = jacobi_smallest_eigenvector(&cov);
        assert!(n.dot(&oracle).abs() > (1e-9f64).cos() - 1e-12);
        assert!(n.dot(&truth).abs().acos() < 2f64.to_radians());
    }

    #[test]
    fn degenerate_neighborhoods_error() {
        let same = PointCloud::new(vec![Vector3::new(1.0, 2.0, 3.0); 25]).unwrap();
        let index = SpatialIndex::new(&same);
        assert!(matches!(
            estimate_covariance_normal(&same, &index, &Vector3::zeros(), 20),
            Err(Error::DegenerateNeighborhood(_))
        ));
        let line = PointCloud::new((0..25).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect()).unwrap();
        let index = SpatialIndex::new(&line);
        assert!(estimate_covariance_normal(&line, &index, &Vector3::zeros(), 20).is_err());
        assert!(estimate_covariance_normal(&line, &index, &Vector3::zeros(), 2).is_err());
    }

    #[test]
    fn normal_rotates_with_neighborhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let pts: Vec<_> = (0..20)
                .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.1..0.1)))
                .collect();
            let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let pose = Pose::from_axis_angle(&axis, rng.gen_range(-3.0..3.0), Vector3::new(1.0, 2.0, 3.0));
            let (_, n) = covariance_normal_of(pts.iter()).unwrap();
            let moved: Vec<_> = pts.iter().map(|p| pose.transform_point(p)).collect();
            let (_, n2) = covariance_normal_of(moved.iter()).unwrap();
            let rotated = pose.transform_vector(&n);
            let angle = rotated.dot(&n2).abs().min(1.0).acos();
            assert!(angle < 1e-6);
            assert_eq!(canonicalize_normal(rotated).dot(&n2).signum(), 1.0);
        }
    }

    #[test]
    fn regularized_covariances_are_plane_shaped() {
        let cloud = PointCloud::new(grid_on_plane(Vector3::x(), Vector3::y())).unwrap();
        for c in regularized_covariances(&cloud, 10) {
            let (vals, vecs) = sorted_eigen(&c);
            assert!((vals[0] - PLANE_EPSILON).abs() < 1e-9);
            assert!((vals[2] - 1.0).abs() < 1e-9);
            assert!(vecs[0].z.abs() > 1.0 - 1e-9);
        }
    }
}
