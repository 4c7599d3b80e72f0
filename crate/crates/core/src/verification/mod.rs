//! Outlier rejection for inter-session loop closures: per-candidate gates and
//! pairwise consistency maximization over a maximum clique.

mod clique;

use std::collections::BTreeMap;

use rayon::prelude::*;

pub use clique::{greedy_clique, is_clique, max_clique, ConsistencyGraph};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::graph::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ClosureStatus {
    /// Detected and registered, not (or not yet) accepted.
    Candidate,
    /// Passed the alignment-error and inlier-ratio gates.
    Gated,
    /// Member of the maximum consistent set.
    Verified,
}

impl ClosureStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClosureStatus::Candidate => "candidate",
            ClosureStatus::Gated => "gated",
            ClosureStatus::Verified => "verified",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [ClosureStatus::Candidate, ClosureStatus::Gated, ClosureStatus::Verified]
            .into_iter()
            .find(|c| c.as_str() == s)
    }
}

/// Inter-session loop closure. `relative_pose` maps coordinates of `to`'s
/// keyframe frame into `from`'s.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopClosure {
    pub from: NodeId,
    pub to: NodeId,
    pub relative_pose: Pose,
    pub inlier_ratio: f64,
    pub alignment_error: f64,
    pub descriptor_distance: f64,
    pub status: ClosureStatus,
}

impl LoopClosure {
    pub fn validate(&self) -> Result<()> {
        if self.from == self.to {
            return Err(Error::Data(format!("loop closure connects {} to itself", self.from)));
        }
        if !(0.0..=1.0).contains(&self.inlier_ratio) || !(self.alignment_error >= 0.0) {
            return Err(Error::Data(format!(
                "loop closure {}-{} has ratio {} and error {}",
                self.from, self.to, self.inlier_ratio, self.alignment_error
            )));
        }
        self.relative_pose.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    AlignmentError,
    InlierRatio,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateDecision {
    Accepted,
    Rejected(RejectReason),
}

pub fn gate_candidate(lc: &LoopClosure, max_error: f64, min_inlier: f64) -> GateDecision {
    let error_ok = lc.alignment_error <= max_error;
    let ratio_ok = lc.inlier_ratio >= min_inlier;
    match (error_ok, ratio_ok) {
        (true, true) => GateDecision::Accepted,
        (false, true) => GateDecision::Rejected(RejectReason::AlignmentError),
        (true, false) => GateDecision::Rejected(RejectReason::InlierRatio),
        (false, false) => GateDecision::Rejected(RejectReason::Both),
    }
}

fn lookup(poses: &BTreeMap<NodeId, Pose>, id: NodeId) -> Result<&Pose> {
    poses
        .get(&id)
        .ok_or_else(|| Error::Data(format!("no intra-session pose for keyframe {id}")))
}

/// Translation norm and rotation angle of the cycle
/// `(T^A_{ia,ib})^-1 T_a T^B_{ja,jb} T_b^-1`.
pub fn cycle_error(a: &LoopClosure, b: &LoopClosure, poses: &BTreeMap<NodeId, Pose>) -> Result<(f64, f64)> {
    if (a.from.session, a.to.session) != (b.from.session, b.to.session) {
        return Err(Error::param(format!(
            "closures {}-{} and {}-{} connect different session pairs",
            a.from, a.to, b.from, b.to
        )));
    }
    let intra_a = lookup(poses, a.from)?.between(lookup(poses, b.from)?);
    let intra_b = lookup(poses, a.to)?.between(lookup(poses, b.to)?);
    let cycle = intra_a.inverse() * a.relative_pose * intra_b * b.relative_pose.inverse();
    Ok((cycle.translation_norm(), cycle.rotation_angle()))
}

/// Consistent iff both orderings of the cycle stay within the tolerances.
pub fn pairwise_consistency(
    a: &LoopClosure,
    b: &LoopClosure,
    poses: &BTreeMap<NodeId, Pose>,
    tol_t: f64,
    tol_r: f64,
) -> Result<bool> {
    let (t1, r1) = cycle_error(a, b, poses)?;
    let (t2, r2) = cycle_error(b, a, poses)?;
    Ok(t1.max(t2) <= tol_t && r1.max(r2) <= tol_r)
}

pub fn consistency_graph(
    closures: &[LoopClosure],
    poses: &BTreeMap<NodeId, Pose>,
    tol_t: f64,
    tol_r: f64,
) -> Result<ConsistencyGraph> {
    let n = closures.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let flags: Vec<bool> = pairs
        .par_iter()
        .map(|&(i, j)| pairwise_consistency(&closures[i], &closures[j], poses, tol_t, tol_r))
        .collect::<Result<_>>()?;
    let mut g = ConsistencyGraph::new(n);
    for (&(i, j), ok) in pairs.iter().zip(flags) {
        if ok {
            g.connect(i, j);
        }
    }
    Ok(g)
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationParams {
    pub max_error: f64,
    pub min_inlier: f64,
    pub tol_t: f64,
    pub tol_r: f64,
    pub exact_limit: usize,
}

impl Default for VerificationParams {
    fn default() -> Self {
        Self {
            max_error: 0.3,
            min_inlier: 0.6,
            tol_t: 0.5,
            tol_r: 2.5f64.to_radians(),
            exact_limit: 20,
        }
    }
}

/// Gates every closure, then keeps the maximum consistent subset of the
/// gated ones per ordered session pair. Statuses are updated in place.
pub fn verify_closures(
    closures: &mut [LoopClosure],
    poses: &BTreeMap<NodeId, Pose>,
    params: &VerificationParams,
) -> Result<()> {
    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (k, lc) in closures.iter_mut().enumerate() {
        lc.validate()?;
        lc.status = ClosureStatus::Candidate;
        if gate_candidate(lc, params.max_error, params.min_inlier) == GateDecision::Accepted {
            lc.status = ClosureStatus::Gated;
            groups.entry((lc.from.session, lc.to.session)).or_default().push(k);
        }
    }
    for members in groups.values() {
        let subset: Vec<LoopClosure> = members.iter().map(|&k| closures[k].clone()).collect();
        let g = consistency_graph(&subset, poses, params.tol_t, params.tol_r)?;
        for local in max_clique(&g, params.exact_limit) {
            closures[members[local]].status = ClosureStatus::Verified;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng, t: f64, angle: f64) -> Pose {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        Pose::from_axis_angle(
            &axis,
            rng.gen_range(-angle..angle),
            Vector3::new(rng.gen_range(-t..t), rng.gen_range(-t..t), rng.gen_range(-t..t)),
        )
    }

    /// Two sessions observing one world; session B's frame is offset by
    /// `offset` (world <- B).
    struct World {
        poses: BTreeMap<NodeId, Pose>,
        world_a: Vec<Pose>,
        world_b: Vec<Pose>,
    }

    fn world(rng: &mut ChaCha8Rng, n: usize) -> World {
        let offset = random_pose(rng, 20.0, 3.0);
        let mut poses = BTreeMap::new();
        let mut world_a = Vec::new();
        let mut world_b = Vec::new();
        for k in 0..n as u32 {
            let wa = random_pose(rng, 30.0, 3.0);
            let wb = random_pose(rng, 30.0, 3.0);
            poses.insert(NodeId::new(0, k), wa);
            poses.insert(NodeId::new(1, k), offset.inverse() * wb);
            world_a.push(wa);
            world_b.push(wb);
        }
        World { poses, world_a, world_b }
    }

    fn closure(w: &World, i: u32, j: u32, noise: Pose) -> LoopClosure {
        LoopClosure {
            from: NodeId::new(0, i),
            to: NodeId::new(1, j),
            relative_pose: w.world_a[i as usize].between(&w.world_b[j as usize]) * noise,
            inlier_ratio: 0.9,
            alignment_error: 0.05,
            descriptor_distance: 0.0,
            status: ClosureStatus::Candidate,
        }
    }

    #[test]
    fn gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = world(&mut rng, 2);
        let mut lc = closure(&w, 0, 1, Pose::identity());
        lc.alignment_error = 0.0;
        lc.inlier_ratio = 1.0;
        assert_eq!(gate_candidate(&lc, 1e-9, 1e-9), GateDecision::Accepted);
        lc.inlier_ratio = 0.0;
        assert_eq!(gate_candidate(&lc, 0.3, 0.6), GateDecision::Rejected(RejectReason::InlierRatio));
        for _ in 0..100 {
            lc.alignment_error = rng.gen_range(0.0..0.6);
            lc.inlier_ratio = rng.gen_range(0.0..1.0);
            let accepted = lc.alignment_error <= 0.3 && lc.inlier_ratio >= 0.6;
            assert_eq!(gate_candidate(&lc, 0.3, 0.6) == GateDecision::Accepted, accepted);
        }
    }

    #[test]
    fn exact_closures_are_consistent_and_outliers_are_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = world(&mut rng, 4);
        let a = closure(&w, 0, 1, Pose::identity());
        let b = closure(&w, 2, 3, Pose::identity());
        let (t, r) = cycle_error(&a, &b, &w.poses).unwrap();
        assert!(t < 1e-9 && r < 1e-9);
        let bad = closure(&w, 2, 3, Pose::from_translation(Vector3::new(10.0, 0.0, 0.0)));
        assert!(!pairwise_consistency(&a, &bad, &w.poses, 0.5, 0.05).unwrap());
        assert!(pairwise_consistency(&a, &b, &w.poses, 0.5, 0.05).unwrap());
        let mut missing = w.poses.clone();
        missing.remove(&NodeId::new(1, 3));
        assert!(matches!(cycle_error(&a, &b, &missing), Err(Error::Data(_))));
    }

    #[test]
    fn consistency_matrix_matches_cycle_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = world(&mut rng, 6);
        let mut closures: Vec<_> = (0..6).map(|k| closure(&w, k, 5 - k, random_pose(&mut rng, 0.05, 0.005))).collect();
        closures[1].relative_pose = closures[1].relative_pose * random_pose(&mut rng, 5.0, 1.0);
        closures[4].relative_pose = closures[4].relative_pose * random_pose(&mut rng, 5.0, 1.0);
        let (tol_t, tol_r) = (0.5, 2.5f64.to_radians());
        let g = consistency_graph(&closures, &w.poses, tol_t, tol_r).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expected = i == j || {
                    // homogeneous matrices built from world poses
                    let (a, b) = (&closures[i], &closures[j]);
                    let ha = |k: NodeId| w.world_a[k.keyframe as usize].to_homogeneous();
                    let hb = |k: NodeId| w.world_b[k.keyframe as usize].to_homogeneous();
                    let cycle = |x: &LoopClosure, y: &LoopClosure| {
                        let m = (ha(x.from).try_inverse().unwrap() * ha(y.from)).try_inverse().unwrap()
                            * x.relative_pose.to_homogeneous()
                            * (hb(x.to).try_inverse().unwrap() * hb(y.to))
                            * y.relative_pose.to_homogeneous().try_inverse().unwrap();
                        let t = m.fixed_view::<3, 1>(0, 3).norm();
                        let cos = ((m[(0, 0)] + m[(1, 1)] + m[(2, 2)] - 1.0) / 2.0).clamp(-1.0, 1.0);
                        (t, cos.acos())
                    };
                    let (t1, r1) = cycle(a, b);
                    let (t2, r2) = cycle(b, a);
                    t1.max(t2) <= tol_t && r1.max(r2) <= tol_r
                };
                assert_eq!(g.adjacent(i, j), expected, "{i} {j}");
            }
        }
        assert!(!g.adjacent(0, 1) && !g.adjacent(3, 4) && g.adjacent(0, 2));
    }

    #[test]
    fn consistency_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = world(&mut rng, 5);
        for _ in 0..50 {
            let a = closure(&w, rng.gen_range(0..5), rng.gen_range(0..5), random_pose(&mut rng, 0.8, 0.06));
            let b = closure(&w, rng.gen_range(0..5), rng.gen_range(0..5), random_pose(&mut rng, 0.8, 0.06));
            assert_eq!(
                pairwise_consistency(&a, &b, &w.poses, 0.5, 0.044).unwrap(),
                pairwise_consistency(&b, &a, &w.poses, 0.5, 0.044).unwrap()
            );
        }
    }

    #[test]
    fn planted_outliers_are_removed() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let w = world(&mut rng, 8);
            let mut closures: Vec<_> = (0..8u32)
                .map(|k| closure(&w, k, (k * 3) % 8, random_pose(&mut rng, 0.02, 0.001)))
                .collect();
            for &o in &[2usize, 6] {
                closures[o].relative_pose = closures[o].relative_pose
                    * Pose::from_axis_angle(&Vector3::z(), 0.3, Vector3::new(3.0, -2.0, 1.0));
            }
            verify_closures(&mut closures, &w.poses, &VerificationParams::default()).unwrap();
            for (k, c) in closures.iter().enumerate() {
                let outlier = k == 2 || k == 6;
                assert_eq!(c.status == ClosureStatus::Verified, !outlier, "seed {seed} closure {k}");
            }
        }
    }
}
