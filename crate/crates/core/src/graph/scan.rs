//! Scan-matching-cost factors and keyframe overlap.
//!
//! A factor between nodes `i` and `j` carries the GICP objective
//!
//! ```text
//! scale * sum_c d_c^T W_c d_c,   d_c = p^j_c - T_j^-1 T_i p^i_c,
//! W_c = (S^j_c + R S^i_c R^T)^-1,   R = rot(T_j^-1 T_i)
//! ```
//!
//! over nearest-neighbor correspondences re-estimated at every
//! linearization. With left perturbations `T <- exp(delta) T` and
//! `x = T_i p^i` in world coordinates, `A_c = R_j^T [ [x]x, -I ]` and
//! `B_c = -A_c`.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};

use super::NodeId;
use crate::error::{Error, Result};
use crate::geometry::{skew, with_gicp_covariances, Pose, PointCloud, SpatialIndex};

/// Keyframe cloud in its own sensor frame, with GICP covariances and a
/// search index.
#[derive(Clone, Debug)]
pub struct KeyframeCloud {
    cloud: PointCloud,
    index: SpatialIndex,
    center: Vector3<f64>,
    radius: f64,
}

impl KeyframeCloud {
    pub fn new(cloud: PointCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::Data("keyframe cloud is empty".into()));
        }
        if cloud.covariances().is_none() {
            return Err(Error::param("keyframe cloud needs per-point covariances"));
        }
        let (center, radius) = cloud.bounding_sphere().unwrap();
        let index = SpatialIndex::new(&cloud);
        Ok(Self {
            cloud,
            index,
            center,
            radius,
        })
    }

    /// Attaches plane-regularized covariances from `k` neighbors.
    pub fn with_covariances(cloud: &PointCloud, k: usize) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::Data("keyframe cloud is empty".into()));
        }
        Self::new(with_gicp_covariances(cloud, k)?)
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }
}

fn covered_fraction(a: &KeyframeCloud, b: &KeyframeCloud, a_to_b: &Pose, radius: f64) -> f64 {
    let hits = a
        .cloud
        .points()
        .iter()
        .filter(|p| b.index.nearest_within(&a_to_b.transform_point(p), radius).is_some())
        .count();
    hits as f64 / a.len() as f64
}

/// Smaller of the two directional fractions of points that have a neighbor
/// of the other cloud strictly within `radius`, in the common frame.
pub fn compute_overlap(a: &KeyframeCloud, pose_a: &Pose, b: &KeyframeCloud, pose_b: &Pose, radius: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("overlap of an empty cloud".into()));
    }
    let ca = pose_a.transform_point(&a.center);
    let cb = pose_b.transform_point(&b.center);
    if (ca - cb).norm() > a.radius + b.radius + radius {
        return Ok(0.0);
    }
    let a_to_b = pose_b.inverse() * *pose_a;
    let ab = covered_fraction(a, b, &a_to_b, radius);
    if ab == 0.0 {
        return Ok(0.0);
    }
    let ba = covered_fraction(b, a, &a_to_b.inverse(), radius);
    Ok(ab.min(ba))
}

/// Selected scan-factor pair with its overlap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlapPair {
    pub a: NodeId,
    pub b: NodeId,
    pub overlap: f64,
}

/// Every keyframe keeps its `n_k` best cross-session partners with overlap
/// above `min_overlap`; the union is returned with `a < b`, sorted.
pub fn place_scan_match_factors(
    clouds: &BTreeMap<NodeId, Arc<KeyframeCloud>>,
    poses: &BTreeMap<NodeId, Pose>,
    min_overlap: f64,
    n_k: usize,
    radius: f64,
) -> Result<Vec<OverlapPair>> {
    use rayon::prelude::*;
    let nodes: Vec<NodeId> = clouds.keys().copied().collect();
    for n in &nodes {
        if !poses.contains_key(n) {
            return Err(Error::Data(format!("no pose for keyframe {n}")));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..nodes.len())
        .flat_map(|i| (i + 1..nodes.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| nodes[i].session != nodes[j].session)
        .collect();
    let overlaps: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = (nodes[i], nodes[j]);
            compute_overlap(&clouds[&a], &poses[&a], &clouds[&b], &poses[&b], radius)
        })
        .collect::<Result<_>>()?;
    let mut partners: Vec<Vec<(f64, usize)>> = vec![Vec::new(); nodes.len()];
    for (&(i, j), &o) in pairs.iter().zip(&overlaps) {
        if o > min_overlap {
            partners[i].push((o, j));
            partners[j].push((o, i));
        }
    }
    let mut chosen: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, list) in partners.iter_mut().enumerate() {
        list.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for &(o, j) in list.iter().take(n_k) {
            chosen.insert((i.min(j), i.max(j)), o);
        }
    }
    Ok(chosen
        .into_iter()
        .map(|((i, j), overlap)| OverlapPair {
            a: nodes[i],
            b: nodes[j],
            overlap,
        })
        .collect())
}

/// Scan-matching-cost factor between keyframes of different sessions.
#[derive(Clone, Debug)]
pub struct ScanMatchFactor {
    pub node_i: NodeId,
    pub node_j: NodeId,
    pub scale: f64,
    pub gate: f64,
    /// Keep only pairs that are each other's nearest neighbor.
    pub mutual: bool,
    source: Arc<KeyframeCloud>,
    target: Arc<KeyframeCloud>,
}

/// Hessian blocks and gradient vectors of one linearization.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanLinearization {
    pub h_ii: Matrix6<f64>,
    pub h_ij: Matrix6<f64>,
    pub h_jj: Matrix6<f64>,
    pub b_i: Vector6<f64>,
    pub b_j: Vector6<f64>,
    /// Scaled cost at the linearization point.
    pub cost: f64,
    pub correspondences: Vec<(usize, usize)>,
}

/// `d = p^j - T_j^-1 T_i p^i`.
pub fn correspondence_residual(p_i: &Vector3<f64>, p_j: &Vector3<f64>, t_i: &Pose, t_j: &Pose) -> Vector3<f64> {
    p_j - t_j.inverse().transform_point(&t_i.transform_point(p_i))
}

/// `(A, B)` = derivatives of the residual with respect to left
/// perturbations of `T_i` and `T_j`.
pub fn correspondence_jacobians(p_i: &Vector3<f64>, t_i: &Pose, t_j: &Pose) -> (Matrix3x6<f64>, Matrix3x6<f64>) {
    let x = t_i.transform_point(p_i);
    let rjt = t_j.rotation_matrix().transpose();
    let mut a = Matrix3x6::zeros();
    a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rjt * skew(&x)));
    a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-rjt));
    (a, -a)
}

fn weight(cov_i: &Matrix3<f64>, cov_j: &Matrix3<f64>, r: &Matrix3<f64>) -> Matrix3<f64> {
    let omega = cov_j + r * cov_i * r.transpose();
    omega
        .try_inverse()
        .unwrap_or_else(|| (omega + Matrix3::identity() * 1e-9).try_inverse().unwrap_or_else(Matrix3::identity))
}

impl ScanMatchFactor {
    pub fn new(node_i: NodeId, node_j: NodeId, source: Arc<KeyframeCloud>, target: Arc<KeyframeCloud>, scale: f64, gate: f64) -> Result<Self> {
        if node_i.session == node_j.session {
            return Err(Error::param(format!(
                "scan factor {node_i}-{node_j} must connect different sessions"
            )));
        }
        if !(scale > 0.0) || !(gate > 0.0) {
            return Err(Error::param("scan factor scale and gate must be positive"));
        }
        Ok(Self {
            node_i,
            node_j,
            scale,
            gate,
            mutual: false,
            source,
            target,
        })
    }

    pub fn with_mutual(mut self, mutual: bool) -> Self {
        self.mutual = mutual;
        self
    }

    pub fn with_scale(&self, scale: f64) -> Self {
        Self {
            scale,
            ..self.clone()
        }
    }

    /// Nearest-neighbor pairs `(source index, target index)` at the given
    /// poses.
    pub fn correspondences(&self, t_i: &Pose, t_j: &Pose) -> Vec<(usize, usize)> {
        let rel = t_j.inverse() * *t_i;
        let back = rel.inverse();
        let tp = self.target.cloud.points();
        self.source
            .cloud
            .points()
            .iter()
            .enumerate()
            .filter_map(|(c, p)| {
                let n = self.target.index.nearest_within(&rel.transform_point(p), self.gate)?;
                if self.mutual && self.source.index.nearest(&back.transform_point(&tp[n.index]))?.index != c {
                    return None;
                }
                Some((c, n.index))
            })
            .collect()
    }

    /// Scaled cost over fixed correspondences.
    pub fn cost(&self, corr: &[(usize, usize)], t_i: &Pose, t_j: &Pose) -> f64 {
        let rel = t_j.inverse() * *t_i;
        let r = rel.rotation_matrix();
        let (sp, tp) = (self.source.cloud.points(), self.target.cloud.points());
        let (sc, tc) = (self.source.cloud.covariances().unwrap(), self.target.cloud.covariances().unwrap());
        let sum: f64 = corr
            .iter()
            .map(|&(a, b)| {
                let d = tp[b] - rel.transform_point(&sp[a]);
                d.dot(&(weight(&sc[a], &tc[b], &r) * d))
            })
            .sum();
        self.scale * sum
    }

    /// Blocks over the given correspondences.
    pub fn linearize_with(&self, corr: Vec<(usize, usize)>, t_i: &Pose, t_j: &Pose) -> ScanLinearization {
        let rel = t_j.inverse() * *t_i;
        let r = rel.rotation_matrix();
        let (sp, tp) = (self.source.cloud.points(), self.target.cloud.points());
        let (sc, tc) = (self.source.cloud.covariances().unwrap(), self.target.cloud.covariances().unwrap());
        let mut out = ScanLinearization {
            h_ii: Matrix6::zeros(),
            h_ij: Matrix6::zeros(),
            h_jj: Matrix6::zeros(),
            b_i: Vector6::zeros(),
            b_j: Vector6::zeros(),
            cost: 0.0,
            correspondences: Vec::new(),
        };
        for &(a, b) in &corr {
            let d = tp[b] - rel.transform_point(&sp[a]);
            let w = weight(&sc[a], &tc[b], &r);
            let (ja, jb) = correspondence_jacobians(&sp[a], t_i, t_j);
            let at_w = ja.transpose() * w;
            let bt_w = jb.transpose() * w;
            out.h_ii += at_w * ja;
            out.h_ij += at_w * jb;
            out.h_jj += bt_w * jb;
            out.b_i += at_w * d;
            out.b_j += bt_w * d;
            out.cost += d.dot(&(w * d));
        }
        let s = self.scale;
        out.h_ii *= s;
        out.h_ij *= s;
        out.h_jj *= s;
        out.b_i *= s;
        out.b_j *= s;
        out.cost *= s;
        out.correspondences = corr;
        out
    }
}

/// Re-estimates correspondences at `(T_i, T_j)` and linearizes.
pub fn linearize_scan_match(factor: &ScanMatchFactor, t_i: &Pose, t_j: &Pose) -> ScanLinearization {
    let corr = factor.correspondences(t_i, t_j);
    factor.linearize_with(corr, t_i, t_j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::transform_cloud;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn box_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|k| {
                let (a, b) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0));
                match k % 3 {
                    0 => Vector3::new(a, b, 0.0),
                    1 => Vector3::new(a, 0.0, b),
                    _ => Vector3::new(0.0, a, b),
                }
            })
            .collect()
    }

    fn random_pose(rng: &mut ChaCha8Rng, t: f64, angle: f64) -> Pose {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        Pose::from_axis_angle(
            &axis,
            rng.gen_range(-angle..angle),
            Vector3::new(rng.gen_range(-t..t), rng.gen_range(-t..t), rng.gen_range(-t..t)),
        )
    }

    /// The same world points seen from two keyframe poses.
    fn pair(seed: u64, n: usize) -> (ScanMatchFactor, Pose, Pose) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = PointCloud::new(box_points(&mut rng, n)).unwrap();
        let t_i = random_pose(&mut rng, 5.0, 3.0);
        let t_j = random_pose(&mut rng, 5.0, 3.0);
        let ci = Arc::new(KeyframeCloud::with_covariances(&transform_cloud(&world, &t_i.inverse()), 8).unwrap());
        let cj = Arc::new(KeyframeCloud::with_covariances(&transform_cloud(&world, &t_j.inverse()), 8).unwrap());
        let f = ScanMatchFactor::new(NodeId::new(0, 0), NodeId::new(1, 0), ci, cj, 0.01, 1.0).unwrap();
        (f, t_i, t_j)
    }

    #[test]
    fn vanishes_at_ground_truth() {
        let (f, t_i, t_j) = pair(1, 300);
        let lin = linearize_scan_match(&f, &t_i, &t_j);
        assert_eq!(lin.correspondences.len(), 300);
        assert!(lin.cost < 1e-9);
        assert!(lin.b_i.norm() < 1e-6 && lin.b_j.norm() < 1e-6);
        for h in [lin.h_ii, lin.h_jj] {
            assert!(h.symmetric_eigenvalues().min() >= -1e-9);
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t_i = random_pose(&mut rng, 5.0, 3.0);
            let t_j = random_pose(&mut rng, 5.0, 3.0);
            let p = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let q = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let (a, b) = correspondence_jacobians(&p, &t_i, &t_j);
            let h = 1e-6;
            for k in 0..6 {
                let mut e = Vector6::zeros();
                e[k] = h;
                let fd_a = (correspondence_residual(&p, &q, &t_i.retract(&e), &t_j)
                    - correspondence_residual(&p, &q, &t_i.retract(&-e), &t_j))
                    / (2.0 * h);
                let fd_b = (correspondence_residual(&p, &q, &t_i, &t_j.retract(&e))
                    - correspondence_residual(&p, &q, &t_i, &t_j.retract(&-e)))
                    / (2.0 * h);
                for (an, fd) in [(a.column(k).into_owned(), fd_a), (b.column(k).into_owned(), fd_b)] {
                    assert!((an - fd).norm() <= 1e-4 * fd.norm().max(1.0));
                }
            }
        }
    }

    #[test]
    fn mutual_pairs_are_a_symmetric_subset() {
        let (f, t_i, t_j) = pair(8, 300);
        let t_j = t_j.retract(&Vector6::new(0.05, -0.03, 0.02, 0.01, 0.02, -0.01));
        let plain = f.correspondences(&t_i, &t_j);
        let f = f.with_mutual(true);
        let mutual = f.correspondences(&t_i, &t_j);
        assert!(!mutual.is_empty() && mutual.len() <= plain.len());
        let rel = t_j.inverse() * t_i;
        let (sp, tp) = (f.source.cloud.points(), f.target.cloud.points());
        for &(a, b) in &mutual {
            assert!(plain.contains(&(a, b)));
            let back = rel.inverse().transform_point(&tp[b]);
            let best = (0..sp.len()).min_by(|&x, &y| (sp[x] - back).norm().total_cmp(&(sp[y] - back).norm())).unwrap();
            assert_eq!(best, a);
        }
        let (g, t_i, t_j) = pair(9, 200);
        assert_eq!(g.with_mutual(true).correspondences(&t_i, &t_j).len(), 200);
    }

    #[test]
    fn scale_is_linear() {
        let (f, t_i, t_j) = pair(3, 200);
        let t_j = t_j.retract(&Vector6::new(0.01, -0.02, 0.01, 0.1, 0.05, -0.08));
        let a = linearize_scan_match(&f, &t_i, &t_j);
        let b = linearize_scan_match(&f.with_scale(0.02), &t_i, &t_j);
        assert_eq!(a.correspondences, b.correspondences);
        assert_eq!(b.h_ii, a.h_ii * 2.0);
        assert_eq!(b.h_ij, a.h_ij * 2.0);
        assert_eq!(b.b_j, a.b_j * 2.0);
        assert_eq!(b.cost, a.cost * 2.0);
    }

    #[test]
    fn empty_correspondences_contribute_nothing() {
        let (f, t_i, _) = pair(4, 100);
        let far = Pose::from_translation(Vector3::new(500.0, 0.0, 0.0));
        let lin = linearize_scan_match(&f, &t_i, &far);
        assert!(lin.correspondences.is_empty());
        assert_eq!(lin.h_ii, Matrix6::zeros());
        assert_eq!(lin.cost, 0.0);
    }

    #[test]
    fn overlap_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = box_points(&mut rng, 500);
        let c = Arc::new(KeyframeCloud::with_covariances(&PointCloud::new(pts).unwrap(), 8).unwrap());
        let id = Pose::identity();
        assert_eq!(compute_overlap(&c, &id, &c, &id, 0.1).unwrap(), 1.0);
        let far = Pose::from_translation(Vector3::new(1000.0, 0.0, 0.0));
        assert_eq!(compute_overlap(&c, &id, &c, &far, 0.1).unwrap(), 0.0);

        // two 4 x 2 m planes sharing half their area
        let mut plane = Vec::new();
        for i in 0..80 {
            for j in 0..40 {
                plane.push(Vector3::new(i as f64 * 0.05, j as f64 * 0.05, 0.0));
            }
        }
        let p = Arc::new(KeyframeCloud::with_covariances(&PointCloud::new(plane).unwrap(), 8).unwrap());
        let shifted = Pose::from_translation(Vector3::new(2.0, 0.0, 0.0));
        let o = compute_overlap(&p, &id, &p, &shifted, 0.02).unwrap();
        assert!((o - 0.5).abs() < 0.05, "{o}");
    }

    #[test]
    fn placement_on_duplicated_and_disjoint_sessions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut clouds = BTreeMap::new();
        let mut poses = BTreeMap::new();
        let shape = PointCloud::new(box_points(&mut rng, 400)).unwrap();
        let kc = Arc::new(KeyframeCloud::with_covariances(&shape, 8).unwrap());
        for s in 0..2 {
            for k in 0..5 {
                let id = NodeId::new(s, k);
                clouds.insert(id, kc.clone());
                poses.insert(id, Pose::from_translation(Vector3::new(k as f64 * 1.0, 0.0, 0.0)));
            }
        }
        let factors = place_scan_match_factors(&clouds, &poses, 0.2, 3, 0.2).unwrap();
        for f in &factors {
            assert!(f.a < f.b && f.a.session != f.b.session && f.overlap > 0.2);
        }
        for k in 0..5 {
            let id = NodeId::new(0, k);
            let partners = (0..5)
                .filter(|&m| {
                    compute_overlap(&kc, &poses[&id], &kc, &poses[&NodeId::new(1, m)], 0.2).unwrap() > 0.2
                })
                .count();
            let count = factors.iter().filter(|f| f.a == id || f.b == id).count();
            assert!(count >= partners.min(3));
        }

        for k in 0..5 {
            poses.insert(NodeId::new(1, k), Pose::from_translation(Vector3::new(k as f64, 500.0, 0.0)));
        }
        assert!(place_scan_match_factors(&clouds, &poses, 0.2, 3, 0.2).unwrap().is_empty());
    }

    #[test]
    fn placement_matches_overlap_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut clouds = BTreeMap::new();
        let mut poses = BTreeMap::new();
        let shape = PointCloud::new(box_points(&mut rng, 400)).unwrap();
        let kc = Arc::new(KeyframeCloud::with_covariances(&shape, 8).unwrap());
        // an L: session 0 along x, session 1 along y, meeting at the origin
        for k in 0..5u32 {
            clouds.insert(NodeId::new(0, k), kc.clone());
            poses.insert(NodeId::new(0, k), Pose::from_translation(Vector3::new(k as f64 * 1.2, 0.0, 0.0)));
            clouds.insert(NodeId::new(1, k), kc.clone());
            poses.insert(NodeId::new(1, k), Pose::from_translation(Vector3::new(0.3, k as f64 * 1.2, 0.0)));
        }
        let got = place_scan_match_factors(&clouds, &poses, 0.2, 2, 0.2).unwrap();
        let ids: Vec<NodeId> = clouds.keys().copied().collect();
        let mut expected = std::collections::BTreeSet::new();
        for &a in &ids {
            let mut list: Vec<(f64, NodeId)> = ids
                .iter()
                .filter(|b| b.session != a.session)
                .map(|&b| (compute_overlap(&kc, &poses[&a], &kc, &poses[&b], 0.2).unwrap(), b))
                .filter(|x| x.0 > 0.2)
                .collect();
            list.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
            for (_, b) in list.into_iter().take(2) {
                expected.insert((a.min(b), a.max(b)));
            }
        }
        let got: std::collections::BTreeSet<_> = got.iter().map(|f| (f.a, f.b)).collect();
        assert_eq!(got, expected);
        assert!(!got.is_empty());
    }
}
