//! Generalized ICP with Levenberg-Marquardt steps on SE(3).
//!
//! Each outer iteration fixes nearest-neighbor correspondences inside the
//! current gate and takes one damped step `T <- exp(delta) T` that must lower
//! `sum r^T (S_q + R S_p R^T)^-1 r` with `r = q - T p` on those
//! correspondences. Rejected steps raise the damping and retry.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::geometry::{skew, Pose, PointCloud, SpatialIndex};

#[derive(Clone, Debug, PartialEq)]
pub struct GicpParams {
    pub max_iter: usize,
    /// Convergence threshold on the norm of an accepted step.
    pub trans_eps: f64,
    pub initial_gate: f64,
    pub gate_decay: f64,
    pub gate_every: usize,
    /// Lower bound for the shrinking gate.
    pub min_gate: f64,
    pub inlier_radius: f64,
    pub min_points: usize,
}

impl Default for GicpParams {
    fn default() -> Self {
        Self {
            max_iter: 64,
            trans_eps: 1e-6,
            initial_gate: 1.0,
            gate_decay: 0.7,
            gate_every: 5,
            min_gate: 0.45,
            inlier_radius: 0.45,
            min_points: 50,
        }
    }
}

impl GicpParams {
    pub fn gate(&self, iteration: usize) -> f64 {
        let shrink = self.gate_decay.powi((iteration / self.gate_every.max(1)) as i32);
        (self.initial_gate * shrink).max(self.min_gate)
    }
}

/// Cost of one accepted step, before and after, on the same correspondences.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AcceptedStep {
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    /// Maps source coordinates into the target frame.
    pub pose: Pose,
    pub inlier_ratio: f64,
    /// Mean squared Mahalanobis residual over the final correspondences.
    pub alignment_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub steps: Vec<AcceptedStep>,
}

struct Pair {
    p: Vector3<f64>,
    q: Vector3<f64>,
    cov_p: Matrix3<f64>,
    cov_q: Matrix3<f64>,
}

fn information(pair: &Pair, r: &Matrix3<f64>) -> Matrix3<f64> {
    let omega = pair.cov_q + r * pair.cov_p * r.transpose();
    omega
        .try_inverse()
        .unwrap_or_else(|| (omega + Matrix3::identity() * 1e-9).try_inverse().unwrap_or_else(Matrix3::identity))
}

fn cost(pairs: &[Pair], t: &Pose) -> f64 {
    let r = t.rotation_matrix();
    pairs
        .iter()
        .map(|c| {
            let res = c.q - t.transform_point(&c.p);
            res.dot(&(information(c, &r) * res))
        })
        .sum()
}

fn correspondences(
    source: &PointCloud,
    target: &PointCloud,
    index: &SpatialIndex,
    t: &Pose,
    gate: f64,
) -> Vec<Pair> {
    let (sc, tc) = (source.covariances().unwrap(), target.covariances().unwrap());
    source
        .points()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            index.nearest_within(&t.transform_point(p), gate).map(|n| Pair {
                p: *p,
                q: target.points()[n.index],
                cov_p: sc[i],
                cov_q: tc[n.index],
            })
        })
        .collect()
}

fn check_input(cloud: &PointCloud, name: &str, min_points: usize) -> Result<()> {
    if cloud.len() < min_points {
        return Err(Error::InsufficientDensity {
            stage: format!("registration {name}"),
            points: cloud.len(),
            required: min_points,
        });
    }
    if cloud.covariances().is_none() {
        return Err(Error::param(format!("registration {name} cloud has no covariances")));
    }
    Ok(())
}

/// Fraction of source points within `radius` of the target after applying
/// `pose`.
pub fn inlier_ratio(source: &PointCloud, target_index: &SpatialIndex, pose: &Pose, radius: f64) -> f64 {
    if source.is_empty() {
        return 0.0;
    }
    let hits = source
        .points()
        .iter()
        .filter(|p| target_index.nearest_within(&pose.transform_point(p), radius).is_some())
        .count();
    hits as f64 / source.len() as f64
}

pub fn gicp_refine(source: &PointCloud, target: &PointCloud, init: &Pose, params: &GicpParams) -> Result<RegistrationResult> {
    check_input(source, "source", params.min_points)?;
    check_input(target, "target", params.min_points)?;
    init.validate()?;
    let index = SpatialIndex::new(target);
    let mut t = *init;
    let mut lambda = 1e-4;
    let mut steps = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..params.max_iter {
        iterations = iter + 1;
        let pairs = correspondences(source, target, &index, &t, params.gate(iter));
        if pairs.is_empty() {
            return Err(Error::RegistrationFailed(format!(
                "no correspondences within {:.3} m at iteration {iter}",
                params.gate(iter)
            )));
        }
        let r = t.rotation_matrix();
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for c in &pairs {
            let x = t.transform_point(&c.p);
            let res = c.q - x;
            let m = information(c, &r);
            // d res / d delta for T <- exp(delta) T, delta = (omega, v)
            let mut j = nalgebra::Matrix3x6::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&x));
            j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Matrix3::identity()));
            let jt_m = j.transpose() * m;
            h += jt_m * j;
            g += jt_m * res;
        }
        let before = cost(&pairs, &t);
        let mut accepted = None;
        for _ in 0..12 {
            let mut damped = h;
            for k in 0..6 {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            let Some(delta) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = t.retract(&delta);
            let after = cost(&pairs, &candidate);
            if after <= before {
                lambda = (lambda * 0.5).max(1e-12);
                accepted = Some((candidate, delta, after));
                break;
            }
            lambda *= 10.0;
        }
        match accepted {
            Some((candidate, delta, after)) => {
                t = candidate;
                steps.push(AcceptedStep { before, after });
                if delta.norm() < params.trans_eps {
                    converged = true;
                    break;
                }
            }
            None => {
                // no descent direction left on these correspondences
                converged = true;
                break;
            }
        }
    }

    let final_pairs = correspondences(source, target, &index, &t, params.gate(iterations.saturating_sub(1)));
    let alignment_error = if final_pairs.is_empty() {
        f64::INFINITY
    } else {
        cost(&final_pairs, &t) / final_pairs.len() as f64
    };
    Ok(RegistrationResult {
        pose: t,
        inlier_ratio: inlier_ratio(source, &index, &t, params.inlier_radius),
        alignment_error,
        iterations,
        converged,
        steps,
    })
}
