//! Batch Levenberg-Marquardt over all keyframe poses of all sessions.
//!
//! Relative-pose factors (intra-session odometry and inter-session loop
//! closures) use the residual `e = log(Z^-1 T_a^-1 T_b)` weighted by their
//! information matrix. Scan-matching factors are re-linearized with fresh
//! correspondences at every outer iteration. The anchor keyframe stays at
//! the identity.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rayon::prelude::*;

use super::scan::{linearize_scan_match, ScanLinearization, ScanMatchFactor};
use super::session::check_information;
use super::{NodeId, SessionGraph};
use crate::error::{Error, Result};
use crate::geometry::{small_adjoint, Pose};
use crate::matching::AcceptedStep;
use crate::verification::LoopClosure;

/// Gaussian constraint on the pose of `to` in the frame of `from`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativePoseFactor {
    pub from: NodeId,
    pub to: NodeId,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

impl RelativePoseFactor {
    /// Residual `log(Z^-1 T_from^-1 T_to)`.
    pub fn residual(&self, t_from: &Pose, t_to: &Pose) -> Vector6<f64> {
        (self.measurement.inverse() * t_from.inverse() * *t_to).log()
    }

    pub fn cost(&self, t_from: &Pose, t_to: &Pose) -> f64 {
        let e = self.residual(t_from, t_to);
        e.dot(&(self.information * e))
    }

    /// `(J_from, J_to)` for left perturbations of both poses.
    pub fn jacobians(&self, t_from: &Pose, t_to: &Pose) -> (Matrix6<f64>, Matrix6<f64>) {
        let e = self.residual(t_from, t_to);
        let ad = small_adjoint(&e);
        let jr_inv = Matrix6::identity() + 0.5 * ad + ad * ad / 12.0;
        let j_to = jr_inv * t_to.inverse().adjoint();
        (-j_to, j_to)
    }
}

/// Isotropic information of a verified closure, growing with its inlier
/// ratio and shrinking with the voxel size.
pub fn loop_information(inlier_ratio: f64, leaf: f64) -> Matrix6<f64> {
    Matrix6::identity() * (inlier_ratio.max(1e-3) / (leaf * leaf))
}

pub fn loop_factor(closure: &LoopClosure, leaf: f64) -> RelativePoseFactor {
    RelativePoseFactor {
        from: closure.from,
        to: closure.to,
        measurement: closure.relative_pose,
        information: loop_information(closure.inlier_ratio, leaf),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerParams {
    pub max_outer: usize,
    /// Stop once the relative cost decrease of an accepted step drops below.
    pub tol: f64,
    pub initial_lambda: f64,
    pub max_retries: usize,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            max_outer: 50,
            tol: 1e-8,
            initial_lambda: 1e-4,
            max_retries: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MergedMap {
    pub poses: BTreeMap<NodeId, Pose>,
    pub anchor: NodeId,
    pub iterations: usize,
    pub steps: Vec<AcceptedStep>,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Scan-factor linearizations that found no correspondence.
    pub empty_scan_linearizations: usize,
}

impl MergedMap {
    pub fn pose(&self, id: NodeId) -> Option<&Pose> {
        self.poses.get(&id)
    }
}

fn anchor_of(graphs: &[SessionGraph]) -> Result<NodeId> {
    graphs
        .iter()
        .flat_map(|g| g.keyframes.iter().map(move |k| NodeId::new(g.session_id, k.id)))
        .min()
        .ok_or(Error::EmptyInput("session graphs"))
}

/// Global poses from the session-local ones: the anchor session is moved so
/// its anchor keyframe sits at the identity, every other session is placed
/// through the first loop factor reaching it from an already placed one.
pub fn initial_poses(graphs: &[SessionGraph], loops: &[RelativePoseFactor]) -> Result<BTreeMap<NodeId, Pose>> {
    let anchor = anchor_of(graphs)?;
    let mut local: BTreeMap<u32, BTreeMap<u32, Pose>> = BTreeMap::new();
    for g in graphs {
        g.validate()?;
        if local.insert(g.session_id, g.pose_map()).is_some() {
            return Err(Error::Data(format!("duplicate session {}", g.session_id)));
        }
    }
    let local_pose = |n: &NodeId| -> Result<Pose> {
        local
            .get(&n.session)
            .and_then(|s| s.get(&n.keyframe))
            .copied()
            .ok_or_else(|| Error::Data(format!("factor references unknown keyframe {n}")))
    };
    for f in loops {
        local_pose(&f.from)?;
        local_pose(&f.to)?;
    }

    let mut offsets: BTreeMap<u32, Pose> = BTreeMap::new();
    offsets.insert(anchor.session, local_pose(&anchor)?.inverse());
    let mut queue = VecDeque::from([anchor.session]);
    while let Some(s) = queue.pop_front() {
        for f in loops {
            let (known, unknown, z) = if f.from.session == s && !offsets.contains_key(&f.to.session) {
                (f.from, f.to, f.measurement)
            } else if f.to.session == s && !offsets.contains_key(&f.from.session) {
                (f.to, f.from, f.measurement.inverse())
            } else {
                continue;
            };
            let x_known = offsets[&s] * local_pose(&known)?;
            let offset = x_known * z * local_pose(&unknown)?.inverse();
            offsets.insert(unknown.session, offset);
            queue.push_back(unknown.session);
        }
    }
    let orphans: Vec<u32> = local.keys().copied().filter(|s| !offsets.contains_key(s)).collect();
    if !orphans.is_empty() {
        return Err(Error::Unmergeable(orphans));
    }
    let mut out = BTreeMap::new();
    for (s, kfs) in &local {
        for (k, p) in kfs {
            out.insert(NodeId::new(*s, *k), offsets[s] * *p);
        }
    }
    out.insert(anchor, Pose::identity());
    Ok(out)
}

fn intra_factors(graphs: &[SessionGraph]) -> Vec<RelativePoseFactor> {
    graphs
        .iter()
        .flat_map(|g| {
            g.between_factors.iter().map(move |f| RelativePoseFactor {
                from: NodeId::new(g.session_id, f.from),
                to: NodeId::new(g.session_id, f.to),
                measurement: f.measurement,
                information: f.information,
            })
        })
        .collect()
}

/// Initializes from [`initial_poses`] and optimizes.
pub fn optimize(
    graphs: &[SessionGraph],
    loop_factors: &[RelativePoseFactor],
    scan_factors: &[ScanMatchFactor],
    params: &OptimizerParams,
) -> Result<MergedMap> {
    let init = initial_poses(graphs, loop_factors)?;
    optimize_from(graphs, loop_factors, scan_factors, &init, params)
}

struct Problem<'a> {
    nodes: Vec<NodeId>,
    index: BTreeMap<NodeId, usize>,
    anchor: usize,
    relative: Vec<RelativePoseFactor>,
    scans: &'a [ScanMatchFactor],
}

impl Problem<'_> {
    /// Column offset of a node in the reduced system, `None` for the anchor.
    fn column(&self, i: usize) -> Option<usize> {
        match i.cmp(&self.anchor) {
            std::cmp::Ordering::Less => Some(6 * i),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(6 * (i - 1)),
        }
    }

    fn ends(&self, a: NodeId, b: NodeId) -> (usize, usize) {
        (self.index[&a], self.index[&b])
    }

    fn relative_cost(&self, x: &[Pose]) -> f64 {
        self.relative
            .iter()
            .map(|f| {
                let (a, b) = self.ends(f.from, f.to);
                f.cost(&x[a], &x[b])
            })
            .sum()
    }

    fn scan_cost(&self, lins: &[ScanLinearization], x: &[Pose]) -> f64 {
        self.scans
            .iter()
            .zip(lins)
            .map(|(f, l)| {
                let (i, j) = self.ends(f.node_i, f.node_j);
                f.cost(&l.correspondences, &x[i], &x[j])
            })
            .sum()
    }

    fn linearize_scans(&self, x: &[Pose]) -> Vec<ScanLinearization> {
        self.scans
            .par_iter()
            .map(|f| {
                let (i, j) = self.ends(f.node_i, f.node_j);
                linearize_scan_match(f, &x[i], &x[j])
            })
            .collect()
    }

    fn add_block(&self, h: &mut DMatrix<f64>, a: usize, b: usize, block: &Matrix6<f64>) {
        if let (Some(ca), Some(cb)) = (self.column(a), self.column(b)) {
            let mut view = h.view_mut((ca, cb), (6, 6));
            view += block;
        }
    }

    fn add_vec(&self, g: &mut DVector<f64>, a: usize, v: &Vector6<f64>) {
        if let Some(ca) = self.column(a) {
            let mut view = g.rows_mut(ca, 6);
            view += v;
        }
    }

    /// Normal equations `H delta = -g` at `x`.
    fn assemble(&self, x: &[Pose], lins: &[ScanLinearization]) -> (DMatrix<f64>, DVector<f64>) {
        let dim = 6 * (self.nodes.len() - 1);
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        for f in &self.relative {
            let (a, b) = self.ends(f.from, f.to);
            let e = f.residual(&x[a], &x[b]);
            let (ja, jb) = f.jacobians(&x[a], &x[b]);
            let (jat, jbt) = (ja.transpose() * f.information, jb.transpose() * f.information);
            self.add_block(&mut h, a, a, &(jat * ja));
            self.add_block(&mut h, a, b, &(jat * jb));
            self.add_block(&mut h, b, a, &(jbt * ja));
            self.add_block(&mut h, b, b, &(jbt * jb));
            self.add_vec(&mut g, a, &(jat * e));
            self.add_vec(&mut g, b, &(jbt * e));
        }
        for (f, l) in self.scans.iter().zip(lins) {
            let (i, j) = self.ends(f.node_i, f.node_j);
            self.add_block(&mut h, i, i, &l.h_ii);
            self.add_block(&mut h, i, j, &l.h_ij);
            self.add_block(&mut h, j, i, &l.h_ij.transpose());
            self.add_block(&mut h, j, j, &l.h_jj);
            self.add_vec(&mut g, i, &l.b_i);
            self.add_vec(&mut g, j, &l.b_j);
        }
        (h, g)
    }

    fn apply(&self, x: &[Pose], delta: &DVector<f64>) -> Vec<Pose> {
        x.iter()
            .enumerate()
            .map(|(i, p)| match self.column(i) {
                Some(c) => p.retract(&Vector6::from_iterator(delta.rows(c, 6).iter().copied())),
                None => *p,
            })
            .collect()
    }
}

/// Optimizes starting from the given global poses; the anchor is forced to
/// the identity.
pub fn optimize_from(
    graphs: &[SessionGraph],
    loop_factors: &[RelativePoseFactor],
    scan_factors: &[ScanMatchFactor],
    init: &BTreeMap<NodeId, Pose>,
    params: &OptimizerParams,
) -> Result<MergedMap> {
    if !(params.tol >= 0.0) || params.initial_lambda <= 0.0 {
        return Err(Error::param("optimizer tol must be >= 0 and initial lambda > 0"));
    }
    let anchor = anchor_of(graphs)?;
    let mut relative = intra_factors(graphs);
    relative.extend(loop_factors.iter().cloned());
    let nodes: Vec<NodeId> = graphs
        .iter()
        .flat_map(|g| g.keyframes.iter().map(move |k| NodeId::new(g.session_id, k.id)))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<NodeId, usize> = nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    for f in &relative {
        check_information(&f.information)?;
        for n in [f.from, f.to] {
            if !index.contains_key(&n) {
                return Err(Error::Data(format!("factor references unknown keyframe {n}")));
            }
        }
    }
    for f in scan_factors {
        for n in [f.node_i, f.node_j] {
            if !index.contains_key(&n) {
                return Err(Error::Data(format!("scan factor references unknown keyframe {n}")));
            }
        }
    }
    let mut x: Vec<Pose> = nodes
        .iter()
        .map(|n| {
            init.get(n)
                .copied()
                .ok_or_else(|| Error::Data(format!("no initial pose for keyframe {n}")))
        })
        .collect::<Result<_>>()?;
    let problem = Problem {
        anchor: index[&anchor],
        nodes,
        index,
        relative,
        scans: scan_factors,
    };
    x[problem.anchor] = Pose::identity();

    let mut lambda = params.initial_lambda;
    let mut steps = Vec::new();
    let mut iterations = 0;
    let mut empty = 0;
    let mut initial_cost = None;
    if problem.nodes.len() > 1 {
        for _ in 0..params.max_outer {
            iterations += 1;
            let lins = problem.linearize_scans(&x);
            empty += lins.iter().filter(|l| l.correspondences.is_empty()).count();
            let before = problem.relative_cost(&x) + lins.iter().map(|l| l.cost).sum::<f64>();
            initial_cost.get_or_insert(before);
            if before == 0.0 {
                break;
            }
            let (h, g) = problem.assemble(&x, &lins);
            let mut accepted = None;
            for _ in 0..params.max_retries {
                let mut damped = h.clone();
                for k in 0..damped.nrows() {
                    damped[(k, k)] += lambda * h[(k, k)].max(1e-9);
                }
                let Some(chol) = damped.cholesky() else {
                    lambda *= 10.0;
                    continue;
                };
                let delta = chol.solve(&(-&g));
                let candidate = problem.apply(&x, &delta);
                let after = problem.relative_cost(&candidate) + problem.scan_cost(&lins, &candidate);
                if after < before {
                    lambda = (lambda * 0.5).max(1e-15);
                    accepted = Some((candidate, after));
                    break;
                }
                lambda *= 10.0;
            }
            let Some((candidate, after)) = accepted else {
                break;
            };
            x = candidate;
            steps.push(AcceptedStep { before, after });
            if (before - after) / before < params.tol {
                break;
            }
        }
    }
    let final_lins = problem.linearize_scans(&x);
    let final_cost = problem.relative_cost(&x) + final_lins.iter().map(|l| l.cost).sum::<f64>();
    Ok(MergedMap {
        poses: problem.nodes.iter().copied().zip(x).collect(),
        anchor,
        iterations,
        steps,
        initial_cost: initial_cost.unwrap_or(final_cost),
        final_cost,
        empty_scan_linearizations: empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BetweenFactor, Keyframe};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn session(id: u32, poses: &[Pose], info: f64) -> SessionGraph {
        let mut g = SessionGraph::new(id);
        for (k, p) in poses.iter().enumerate() {
            g.keyframes.push(Keyframe {
                id: k as u32,
                pose: *p,
                cloud: None,
            });
        }
        for k in 1..poses.len() {
            g.between_factors.push(BetweenFactor {
                from: k as u32 - 1,
                to: k as u32,
                measurement: poses[k - 1].between(&poses[k]),
                information: Matrix6::identity() * info,
            });
        }
        g
    }

    fn square(n_side: usize) -> Vec<Pose> {
        let mut out = Vec::new();
        let mut p = Pose::identity();
        for side in 0..4 {
            for _ in 0..n_side {
                out.push(p);
                p = p * Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
            }
            let _ = side;
            p = p * Pose::from_axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2, Vector3::zeros());
        }
        out
    }

    #[test]
    fn relative_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let mut rp = || {
                Pose::from_axis_angle(
                    &Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0),
                    rng.gen_range(-1.0..1.0),
                    Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
                )
            };
            let (a, b) = (rp(), rp());
            // small residual, as near a solution
            let z = a.between(&b).retract(&Vector6::new(0.01, -0.02, 0.01, 0.03, 0.0, -0.02));
            let f = RelativePoseFactor {
                from: NodeId::new(0, 0),
                to: NodeId::new(0, 1),
                measurement: z,
                information: Matrix6::identity(),
            };
            let (ja, jb) = f.jacobians(&a, &b);
            let h = 1e-6;
            for k in 0..6 {
                let mut e = Vector6::zeros();
                e[k] = h;
                let fa = (f.residual(&a.retract(&e), &b) - f.residual(&a.retract(&-e), &b)) / (2.0 * h);
                let fb = (f.residual(&a, &b.retract(&e)) - f.residual(&a, &b.retract(&-e))) / (2.0 * h);
                assert!((ja.column(k) - fa).norm() < 1e-4);
                assert!((jb.column(k) - fb).norm() < 1e-4);
            }
        }
    }

    #[test]
    fn exact_chain_equals_odometry() {
        let poses = square(3);
        let g = session(0, &poses, 100.0);
        let m = optimize(&[g], &[], &[], &OptimizerParams::default()).unwrap();
        assert_eq!(m.poses[&NodeId::new(0, 0)], Pose::identity());
        let mut acc = Pose::identity();
        for k in 0..poses.len() {
            if k > 0 {
                acc = acc * poses[k - 1].between(&poses[k]);
            }
            let err = acc.between(&m.poses[&NodeId::new(0, k as u32)]);
            assert!(err.translation_norm() < 1e-10 && err.rotation_angle() < 1e-10);
        }
    }

    #[test]
    fn square_loop_recovers_zero_residual() {
        let truth = square(2);
        let mut g = session(0, &truth, 100.0);
        g.between_factors.push(BetweenFactor {
            from: 7,
            to: 0,
            measurement: truth[7].between(&truth[0]),
            information: Matrix6::identity() * 100.0,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kf in g.keyframes.iter_mut().skip(1) {
            let d = Vector6::from_fn(|_, _| rng.gen_range(-0.1..0.1));
            kf.pose = kf.pose.retract(&d);
        }
        let m = optimize(&[g], &[], &[], &OptimizerParams::default()).unwrap();
        assert!(m.final_cost < 1e-12, "{}", m.final_cost);
        for (k, t) in truth.iter().enumerate() {
            let err = t.between(&m.poses[&NodeId::new(0, k as u32)]);
            assert!(err.translation_norm() < 1e-6 && err.rotation_angle() < 1e-6);
        }
        assert!(m.steps.iter().all(|s| s.after <= s.before));
    }

    fn two_sessions(noise: f64, seed: u64) -> (Vec<SessionGraph>, Vec<RelativePoseFactor>, Vec<Pose>, Vec<Pose>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth_a = square(3);
        let offset = Pose::from_axis_angle(&Vector3::z(), 0.7, Vector3::new(0.5, -0.3, 0.1));
        let truth_b: Vec<Pose> = truth_a
            .iter()
            .map(|p| *p * Pose::from_translation(Vector3::new(0.2, 0.3, 0.0)))
            .collect();
        let noisy = |truth: &[Pose], rng: &mut ChaCha8Rng, base: Pose| {
            let mut out = vec![base * truth[0]];
            for k in 1..truth.len() {
                let d = Vector6::from_fn(|r, _| noise * if r < 3 { 0.1f64.to_radians() } else { 0.01 } * rng.gen_range(-1.0..1.0));
                let step = truth[k - 1].between(&truth[k]).retract(&d);
                out.push(out[k - 1] * step);
            }
            out
        };
        let odo_a = noisy(&truth_a, &mut rng, Pose::identity());
        let odo_b = noisy(&truth_b, &mut rng, offset);
        let mut ga = session(0, &odo_a, 1e4);
        let mut gb = session(1, &odo_b, 1e4);
        for g in [&mut ga, &mut gb] {
            for f in &mut g.between_factors {
                f.information = Matrix6::from_diagonal(&Vector6::new(3e5, 3e5, 3e5, 1e4, 1e4, 1e4));
            }
        }
        let loops: Vec<RelativePoseFactor> = (0..truth_a.len())
            .step_by(3)
            .map(|k| RelativePoseFactor {
                from: NodeId::new(0, k as u32),
                to: NodeId::new(1, k as u32),
                measurement: truth_a[k].between(&truth_b[k]),
                information: loop_information(0.8, 0.3),
            })
            .collect();
        (vec![ga, gb], loops, truth_a, truth_b)
    }

    #[test]
    fn two_sessions_merge_with_loop_factors() {
        let (graphs, loops, ta, tb) = two_sessions(1.0, 3);
        let m = optimize(&graphs, &loops, &[], &OptimizerParams::default()).unwrap();
        let mut sq = 0.0;
        for (k, (a, b)) in ta.iter().zip(&tb).enumerate() {
            sq += (m.poses[&NodeId::new(0, k as u32)].translation() - a.translation()).norm_squared();
            sq += (m.poses[&NodeId::new(1, k as u32)].translation() - b.translation()).norm_squared();
        }
        let rmse = (sq / (2 * ta.len()) as f64).sqrt();
        assert!(rmse < 0.05, "{rmse}");
        assert!(m.steps.iter().all(|s| s.after <= s.before));
    }

    #[test]
    fn gauge_freedom() {
        let (graphs, loops, _, _) = two_sessions(1.0, 4);
        let m1 = optimize(&graphs, &loops, &[], &OptimizerParams::default()).unwrap();
        let g = Pose::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 1.1, Vector3::new(4.0, -2.0, 7.0));
        let moved: Vec<SessionGraph> = graphs
            .iter()
            .map(|s| {
                let mut s = s.clone();
                for k in &mut s.keyframes {
                    k.pose = g * k.pose;
                }
                s
            })
            .collect();
        let m2 = optimize(&moved, &loops, &[], &OptimizerParams::default()).unwrap();
        let ids: Vec<NodeId> = m1.poses.keys().copied().collect();
        for a in &ids {
            for b in &ids {
                let r1 = m1.poses[a].between(&m1.poses[b]);
                let r2 = m2.poses[a].between(&m2.poses[b]);
                let err = r1.between(&r2);
                assert!(err.translation_norm() < 1e-8 && err.rotation_angle() < 1e-8);
            }
        }
    }

    #[test]
    fn orphan_session_is_unmergeable() {
        let (mut graphs, loops, ..) = two_sessions(0.0, 5);
        graphs.push(session(7, &square(1), 1.0));
        match optimize(&graphs, &loops, &[], &OptimizerParams::default()) {
            Err(Error::Unmergeable(ids)) => assert_eq!(ids, vec![7]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loop_information_is_isotropic() {
        let info = loop_information(0.5, 0.25);
        assert_eq!(info, Matrix6::identity() * 8.0);
    }
}
