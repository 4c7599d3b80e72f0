//! Training losses with analytic gradients, kept as a verified reference
//! for a future training port.

use nalgebra::Vector3;

use crate::descriptor::Features;
use crate::error::{Error, Result};
use crate::geometry::{Pose, SpatialIndex};

/// Keypoint patch overlap after ground-truth alignment.
///
/// `ratio[i][j]` is the smaller of the two directional fractions of patch
/// points lying within `leaf` of the other patch, so it does not depend on
/// which cloud is called `P`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchOverlap {
    pub radius: f64,
    pub leaf: f64,
    ratio: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl PatchOverlap {
    /// Patches are the dense points within `radius` of each keypoint. The
    /// `Q` side is mapped into the frame of `P` with `q_to_p`.
    pub fn compute(
        keypoints_p: &[Vector3<f64>],
        dense_p: &[Vector3<f64>],
        keypoints_q: &[Vector3<f64>],
        dense_q: &[Vector3<f64>],
        q_to_p: &Pose,
        radius: f64,
        leaf: f64,
    ) -> Result<Self> {
        if !(radius > 0.0) || !(leaf > 0.0) {
            return Err(Error::param("patch radius and leaf must be positive"));
        }
        let kq: Vec<_> = keypoints_q.iter().map(|p| q_to_p.transform_point(p)).collect();
        let dq: Vec<_> = dense_q.iter().map(|p| q_to_p.transform_point(p)).collect();
        let patches = |kps: &[Vector3<f64>], dense: Vec<Vector3<f64>>| -> Vec<Vec<Vector3<f64>>> {
            if dense.is_empty() {
                return vec![Vec::new(); kps.len()];
            }
            let index = SpatialIndex::from_points(dense);
            kps.iter()
                .map(|k| index.within_radius(k, radius).iter().map(|n| index.points()[n.index]).collect())
                .collect()
        };
        let pp = patches(keypoints_p, dense_p.to_vec());
        let pq = patches(&kq, dq);
        let (rows, cols) = (pp.len(), pq.len());
        let mut ratio = vec![0.0; rows * cols];
        let covered = |a: &[Vector3<f64>], b: &SpatialIndex| {
            a.iter().filter(|x| b.nearest_within(x, leaf).is_some()).count() as f64 / a.len() as f64
        };
        let q_index: Vec<Option<SpatialIndex>> = pq
            .iter()
            .map(|p| (!p.is_empty()).then(|| SpatialIndex::from_points(p.clone())))
            .collect();
        for i in 0..rows {
            if pp[i].is_empty() {
                continue;
            }
            let p_index = SpatialIndex::from_points(pp[i].clone());
            for j in 0..cols {
                let Some(qi) = &q_index[j] else { continue };
                if (keypoints_p[i] - kq[j]).norm() > 2.0 * radius + leaf {
                    continue;
                }
                let ab = covered(&pp[i], qi);
                if ab > 0.0 {
                    ratio[i * cols + j] = ab.min(covered(&pq[j], &p_index));
                }
            }
        }
        Ok(Self {
            radius,
            leaf,
            ratio,
            rows,
            cols,
        })
    }

    pub fn from_matrix(rows: usize, cols: usize, ratio: Vec<f64>) -> Result<Self> {
        if ratio.len() != rows * cols || ratio.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::param("overlap matrix must be rows x cols with entries in [0, 1]"));
        }
        Ok(Self {
            radius: f64::NAN,
            leaf: f64::NAN,
            ratio,
            rows,
            cols,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.ratio[i * self.cols + j]
    }

    pub fn transposed(&self) -> Self {
        let mut ratio = vec![0.0; self.ratio.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                ratio[j * self.rows + i] = self.get(i, j);
            }
        }
        Self {
            ratio,
            rows: self.cols,
            cols: self.rows,
            ..*self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircleParams {
    pub gamma: f64,
    pub margin_pos: f64,
    pub margin_neg: f64,
    /// Pairs at or above this overlap are positives.
    pub positive_overlap: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            margin_pos: 0.1,
            margin_neg: 1.4,
            positive_overlap: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CircleLoss {
    pub value: f64,
    pub grad_p: Features,
    pub grad_q: Features,
    /// Anchors used on each side (those with at least one positive).
    pub anchors: (usize, usize),
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// One direction: mean over anchors of `f` with a positive, accumulating
/// gradients scaled by `weight`.
fn circle_direction(
    f: &Features,
    g: &Features,
    overlap: &PatchOverlap,
    params: &CircleParams,
    weight: f64,
    grad_f: &mut Features,
    grad_g: &mut Features,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut per_anchor: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    for i in 0..f.len() {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for j in 0..g.len() {
            let lambda = overlap.get(i, j);
            let d = distance(f.row(i), g.row(j));
            if lambda >= params.positive_overlap {
                pos.push((j, d, lambda.sqrt()));
            } else {
                neg.push((j, d));
            }
        }
        if pos.is_empty() {
            continue;
        }
        let a: Vec<f64> = pos.iter().map(|&(_, d, s)| params.gamma * (d - params.margin_pos).powi(2) * s).collect();
        let b: Vec<f64> = neg.iter().map(|&(_, d)| params.gamma * (params.margin_neg - d).powi(2)).collect();
        let (la, lb) = (log_sum_exp(&a), log_sum_exp(&b));
        let z = la + lb;
        total += softplus(z);
        // dL/dd for every pair of this anchor
        let s = sigmoid(z);
        let mut dd = Vec::new();
        if lb.is_finite() {
            for (k, &(j, d, sq)) in pos.iter().enumerate() {
                dd.push((j, s * (a[k] - la).exp() * 2.0 * params.gamma * (d - params.margin_pos) * sq));
            }
            for (k, &(j, d)) in neg.iter().enumerate() {
                dd.push((j, s * (b[k] - lb).exp() * -2.0 * params.gamma * (params.margin_neg - d)));
            }
        }
        per_anchor.push((i, dd));
    }
    let count = per_anchor.len();
    if count == 0 {
        return (0.0, 0);
    }
    let scale = weight / count as f64;
    for (i, dd) in per_anchor {
        for (j, g_d) in dd {
            let d = distance(f.row(i), g.row(j));
            if d == 0.0 {
                continue;
            }
            let c = scale * g_d / d;
            for k in 0..f.dim() {
                let diff = f.row(i)[k] - g.row(j)[k];
                grad_f.row_mut(i)[k] += c * diff;
                grad_g.row_mut(j)[k] -= c * diff;
            }
        }
    }
    (total / count as f64, count)
}

/// Overlap-aware circle loss averaged over both directions, with its
/// gradient with respect to every descriptor. A direction without any
/// anchor contributes zero.
pub fn circle_loss(desc_p: &Features, desc_q: &Features, overlap: &PatchOverlap, params: &CircleParams) -> Result<CircleLoss> {
    if desc_p.dim() != desc_q.dim() {
        return Err(Error::param("descriptor dimensions differ"));
    }
    if overlap.shape() != (desc_p.len(), desc_q.len()) {
        return Err(Error::param(format!(
            "overlap matrix is {:?}, descriptors are {} x {}",
            overlap.shape(),
            desc_p.len(),
            desc_q.len()
        )));
    }
    if !(params.gamma > 0.0) {
        return Err(Error::param("circle loss gamma must be positive"));
    }
    let mut grad_p = Features::zeros(desc_p.len(), desc_p.dim());
    let mut grad_q = Features::zeros(desc_q.len(), desc_q.dim());
    let (lp, np) = circle_direction(desc_p, desc_q, overlap, params, 0.5, &mut grad_p, &mut grad_q);
    let (lq, nq) = circle_direction(desc_q, desc_p, &overlap.transposed(), params, 0.5, &mut grad_q, &mut grad_p);
    Ok(CircleLoss {
        value: 0.5 * (lp + lq),
        grad_p,
        grad_q,
        anchors: (np, nq),
    })
}

/// Mean of `|(T - T_hat) (p, 1)|^2` over the cloud.
pub fn transformation_loss(t_hat: &Pose, t_gt: &Pose, points: &[Vector3<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::param("transformation loss over an empty cloud"));
    }
    t_hat.validate()?;
    t_gt.validate()?;
    let dr = t_gt.rotation_matrix() - t_hat.rotation_matrix();
    let dt = t_gt.translation() - t_hat.translation();
    Ok(points.iter().map(|p| (dr * p + dt).norm_squared()).sum::<f64>() / points.len() as f64)
}

/// Bidirectional mean squared nearest-neighbor distance, halved per side.
pub fn chamfer_loss(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::param("chamfer loss of an empty keypoint set"));
    }
    let side = |a: &[Vector3<f64>], b: &[Vector3<f64>]| {
        a.iter()
            .map(|x| b.iter().map(|y| (x - y).norm_squared()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / (2.0 * a.len() as f64)
    };
    Ok(side(p, q) + side(q, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_features(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Features {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= n);
                v
            })
            .collect();
        Features::from_rows(dim, &rows).unwrap()
    }

    #[test]
    fn margins_cancel() {
        // one anchor per side: P0 has one positive Q0 at distance 0.1 and two
        // negatives at 1.4
        let p = Features::from_rows(1, &[[0.0]]).unwrap();
        let q = Features::from_rows(1, &[[0.1], [1.4], [-1.4]]).unwrap();
        let ov = PatchOverlap::from_matrix(1, 3, vec![0.5, 0.0, 0.0]).unwrap();
        let l = circle_loss(&p, &q, &ov, &CircleParams::default()).unwrap();
        // Q side: Q0 anchors with P0 positive and no negatives, so log(1) = 0
        assert_eq!(l.anchors, (1, 1));
        assert!((l.value - 0.5 * (1.0 + 2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn scalar_oracle() {
        let p = Features::from_rows(1, &[[0.0]]).unwrap();
        let q = Features::from_rows(1, &[[0.0], [2.0]]).unwrap();
        let ov = PatchOverlap::from_matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let params = CircleParams {
            gamma: 1.0,
            ..CircleParams::default()
        };
        let l = circle_loss(&p, &q, &ov, &params).unwrap();
        let lp = (1.0 + (0.1f64).powi(2).exp() * (0.6f64).powi(2).exp()).ln();
        assert!((l.value - 0.5 * lp).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_features(2, 4, &mut rng);
        let q = random_features(2, 4, &mut rng);
        let ov = PatchOverlap::from_matrix(2, 2, vec![0.6, 0.05, 0.0, 0.3]).unwrap();
        let params = CircleParams::default();
        let l = circle_loss(&p, &q, &ov, &params).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for side in 0..2 {
            let base = if side == 0 { &p } else { &q };
            for i in 0..base.len() {
                for k in 0..base.dim() {
                    let eval = |delta: f64| {
                        let mut m = base.clone();
                        m.row_mut(i)[k] += delta;
                        let (a, b) = if side == 0 { (&m, &q) } else { (&p, &m) };
                        circle_loss(a, b, &ov, &params).unwrap().value
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = if side == 0 { l.grad_p.row(i)[k] } else { l.grad_q.row(i)[k] };
                    max_rel = max_rel.max((an - fd).abs() / fd.abs().max(1e-3));
                }
            }
        }
        assert!(max_rel < 1e-4, "{max_rel}");
    }

    #[test]
    fn anchors_without_positives_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_features(3, 4, &mut rng);
        let q = random_features(3, 4, &mut rng);
        let ov = PatchOverlap::from_matrix(3, 3, vec![0.0; 9]).unwrap();
        let l = circle_loss(&p, &q, &ov, &CircleParams::default()).unwrap();
        assert_eq!(l.anchors, (0, 0));
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn patch_overlap_of_shifted_copies() {
        let mut dense = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                dense.push(Vector3::new(i as f64 * 0.05, j as f64 * 0.05, 0.0));
            }
        }
        let kp = vec![Vector3::new(1.0, 1.0, 0.0), Vector3::new(0.3, 0.3, 0.0)];
        let ov = PatchOverlap::compute(&kp, &dense, &kp, &dense, &Pose::identity(), 0.25, 0.02).unwrap();
        assert_eq!(ov.get(0, 0), 1.0);
        assert_eq!(ov.get(1, 1), 1.0);
        assert_eq!(ov.get(0, 1), 0.0);
        let t = ov.transposed();
        assert_eq!(t.get(1, 0), ov.get(0, 1));
    }

    #[test]
    fn transformation_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..50)
            .map(|_| Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)))
            .collect();
        let a = Pose::from_axis_angle(&Vector3::new(0.1, 1.0, 0.3), 0.4, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(transformation_loss(&a, &a, &pts).unwrap(), 0.0);
        let d = Vector3::new(0.3, -0.4, 1.2);
        let b = Pose::from_translation(d) * a;
        assert!((transformation_loss(&b, &a, &pts).unwrap() - d.norm_squared()).abs() < 1e-12);
        let c = Pose::from_axis_angle(&Vector3::new(1.0, 0.0, 0.3), -0.7, Vector3::new(0.0, 1.0, -2.0));
        let (tg, th) = (a.to_homogeneous(), c.to_homogeneous());
        let oracle: f64 = pts
            .iter()
            .map(|p| {
                let rho = nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
                ((tg - th) * rho).norm_squared()
            })
            .sum::<f64>()
            / 50.0;
        assert!((transformation_loss(&c, &a, &pts).unwrap() - oracle).abs() < 1e-10);
        assert!(transformation_loss(&a, &a, &[]).is_err());
    }

    #[test]
    fn chamfer_cases() {
        let o = [Vector3::zeros()];
        let x = [Vector3::x()];
        assert_eq!(chamfer_loss(&o, &x).unwrap(), 1.0);
        assert_eq!(chamfer_loss(&o, &o).unwrap(), 0.0);
        assert!(chamfer_loss(&o, &[]).is_err());
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_and_nonnegative(
            p in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..20),
            q in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..20),
        ) {
            let p: Vec<_> = p.iter().map(|a| Vector3::from(*a)).collect();
            let q: Vec<_> = q.iter().map(|a| Vector3::from(*a)).collect();
            let ab = chamfer_loss(&p, &q).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, chamfer_loss(&q, &p).unwrap());
        }

        #[test]
        fn circle_loss_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_features(4, 3, &mut rng);
            let q = random_features(5, 3, &mut rng);
            let ov: Vec<f64> = (0..20).map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.0..1.0) } else { 0.0 }).collect();
            let ov = PatchOverlap::from_matrix(4, 5, ov).unwrap();
            prop_assert!(circle_loss(&p, &q, &ov, &CircleParams::default()).unwrap().value >= 0.0);
        }
    }
}
