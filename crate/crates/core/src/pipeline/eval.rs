//! Scoring a merged map and its loop closures against ground truth.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::graph::{GraphFile, NodeId};
use crate::metrics::{ate_rmse, is_registration_success, pose_error, pr_curve, registration_metrics, EvalReport};
use crate::verification::LoopClosure;

pub struct EvalInput<'a> {
    pub merged: &'a GraphFile,
    pub ground_truth: &'a GraphFile,
    /// Loop-factor-only estimate, reported as the "before" ATE.
    pub preliminary: Option<&'a GraphFile>,
    pub closures: Option<&'a [LoopClosure]>,
}

fn associate(est: &BTreeMap<NodeId, Pose>, truth: &BTreeMap<NodeId, Pose>) -> Result<(Vec<Pose>, Vec<Pose>)> {
    let missing: Vec<String> = est
        .keys()
        .filter(|k| !truth.contains_key(k))
        .chain(truth.keys().filter(|k| !est.contains_key(k)))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("unmatched keyframes: {}", missing.join(","))));
    }
    Ok(est.iter().map(|(k, p)| (*p, truth[k])).unzip())
}

fn trajectory_ate(est: &GraphFile, truth: &BTreeMap<NodeId, Pose>) -> Result<f64> {
    let (e, t) = associate(&est.poses(), truth)?;
    ate_rmse(&e, &t)
}

/// ATE of the merged (and optional preliminary) map; for closures,
/// registration errors against the true relative poses and PR curves over
/// descriptor distance and inlier ratio, where a closure counts as correct
/// when its registration succeeds.
pub fn evaluate(input: &EvalInput) -> Result<EvalReport> {
    let truth = input.ground_truth.poses();
    let mut report = EvalReport {
        ate_rmse: Some(trajectory_ate(input.merged, &truth)?),
        ..EvalReport::default()
    };
    if let Some(pre) = input.preliminary {
        report.ate_rmse_before = Some(trajectory_ate(pre, &truth)?);
    }
    if let Some(closures) = input.closures.filter(|c| !c.is_empty()) {
        let mut est = Vec::new();
        let mut gt = Vec::new();
        for c in closures {
            let (a, b) = match (truth.get(&c.from), truth.get(&c.to)) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Data(format!("closure {}-{} has no ground truth", c.from, c.to))),
            };
            est.push(c.relative_pose);
            gt.push(a.between(b));
        }
        let reg = registration_metrics(&est, &gt)?;
        let labels: Vec<bool> = est
            .iter()
            .zip(&gt)
            .map(|(e, t)| {
                let (te, re) = pose_error(e, t);
                is_registration_success(te, re)
            })
            .collect();
        let by_distance: Vec<(f64, bool)> = closures.iter().zip(&labels).map(|(c, &l)| (-c.descriptor_distance, l)).collect();
        let by_inlier: Vec<(f64, bool)> = closures.iter().zip(&labels).map(|(c, &l)| (c.inlier_ratio, l)).collect();
        report.pr_distance = pr_curve(&by_distance).ok();
        report.pr_inlier = pr_curve(&by_inlier).ok();
        report.registration = Some(reg);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Keyframe, SessionGraph};
    use crate::verification::ClosureStatus;
    use nalgebra::Vector3;

    fn graph(offset: f64) -> GraphFile {
        let mut sessions = Vec::new();
        for s in 0..2 {
            let mut g = SessionGraph::new(s);
            for k in 0..5 {
                g.keyframes.push(Keyframe {
                    id: k,
                    pose: Pose::from_axis_angle(&Vector3::z(), 0.3 * k as f64, Vector3::new(k as f64 + offset, s as f64, 0.0)),
                    cloud: None,
                });
            }
            sessions.push(g);
        }
        GraphFile { sessions, inter_edges: vec![] }
    }

    #[test]
    fn self_evaluation_is_exact() {
        let g = graph(0.0);
        let truth = g.poses();
        let a = NodeId::new(0, 1);
        let b = NodeId::new(1, 3);
        let closures = vec![
            LoopClosure {
                from: a,
                to: b,
                relative_pose: truth[&a].between(&truth[&b]),
                inlier_ratio: 0.9,
                alignment_error: 0.01,
                descriptor_distance: 0.1,
                status: ClosureStatus::Verified,
            },
            LoopClosure {
                from: a,
                to: NodeId::new(1, 0),
                relative_pose: Pose::from_translation(Vector3::new(9.0, 0.0, 0.0)),
                inlier_ratio: 0.2,
                alignment_error: 1.0,
                descriptor_distance: 0.3,
                status: ClosureStatus::Candidate,
            },
        ];
        let r = evaluate(&EvalInput {
            merged: &g,
            ground_truth: &g,
            preliminary: Some(&graph(0.0)),
            closures: Some(&closures),
        })
        .unwrap();
        assert!(r.ate_rmse.unwrap() < 1e-12);
        assert!(r.ate_rmse_before.unwrap() < 1e-12);
        let reg = r.registration.unwrap();
        assert_eq!(reg.recall, 0.5);
        assert_eq!(r.pr_distance.unwrap().average_precision, 1.0);
        assert_eq!(r.pr_inlier.unwrap().f1_max, 1.0);
    }

    #[test]
    fn unmatched_keyframes_are_listed() {
        let g = graph(0.0);
        let mut truth = graph(0.0);
        truth.sessions[1].keyframes.pop();
        let err = evaluate(&EvalInput {
            merged: &g,
            ground_truth: &truth,
            preliminary: None,
            closures: None,
        })
        .unwrap_err();
        assert_eq!(err.code(), "E_DATA");
        assert!(err.to_string().contains("1:4"), "{err}");
    }

    #[test]
    fn rigid_offset_is_aligned_away() {
        let r = evaluate(&EvalInput {
            merged: &graph(3.0),
            ground_truth: &graph(0.0),
            preliminary: None,
            closures: None,
        })
        .unwrap();
        assert!(r.ate_rmse.unwrap() < 1e-9);
    }
}
