use std::fmt::Write as _;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::matching::kabsch;

/// Registration success thresholds, both strict.
pub const RE_SUCCESS_DEG: f64 = 5.0;
pub const TE_SUCCESS_M: f64 = 2.0;

// Absorbs rounding in the arccos so a rotation of exactly 5 degrees does
// not land just below the threshold.
const BOUNDARY_SLACK: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrSample {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// One sample per distinct score, thresholds descending.
    pub samples: Vec<PrSample>,
    pub f1_max: f64,
    pub average_precision: f64,
}

/// Sweeps the acceptance threshold over every distinct score; a pair is
/// predicted positive when its score is at least the threshold. Higher
/// scores mean more confident.
pub fn pr_curve(scores: &[(f64, bool)]) -> Result<PrCurve> {
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::param("non-finite score"));
    }
    let positives = scores.iter().filter(|s| s.1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetrics("no positive labels".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut samples = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < sorted.len() {
        let threshold = sorted[k].0;
        while k < sorted.len() && sorted[k].0 == threshold {
            if sorted[k].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        samples.push(PrSample {
            threshold,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    let f1_max = samples
        .iter()
        .map(|s| {
            if s.precision + s.recall == 0.0 {
                0.0
            } else {
                2.0 * s.precision * s.recall / (s.precision + s.recall)
            }
        })
        .fold(0.0, f64::max);
    // precision envelope from the right, integrated over recall steps
    let mut envelope = vec![0.0; samples.len()];
    let mut best: f64 = 0.0;
    for (i, s) in samples.iter().enumerate().rev() {
        best = best.max(s.precision);
        envelope[i] = best;
    }
    let mut average_precision = 0.0;
    let mut prev_recall = 0.0;
    for (s, e) in samples.iter().zip(&envelope) {
        average_precision += (s.recall - prev_recall) * e;
        prev_recall = s.recall;
    }
    Ok(PrCurve {
        samples,
        f1_max,
        average_precision: average_precision.min(1.0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationMetrics {
    /// Mean translation error, m.
    pub te_mean: f64,
    /// Mean rotation error, degrees.
    pub re_mean: f64,
    pub recall: f64,
    pub errors: Vec<(f64, f64)>,
}

/// `(TE m, RE deg)` of one estimate.
pub fn pose_error(estimate: &Pose, truth: &Pose) -> (f64, f64) {
    let te = (estimate.translation() - truth.translation()).norm();
    let m = truth.rotation_matrix().transpose() * estimate.rotation_matrix();
    let c = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    (te, c.acos().to_degrees())
}

pub fn is_registration_success(te: f64, re: f64) -> bool {
    re < RE_SUCCESS_DEG - BOUNDARY_SLACK && te < TE_SUCCESS_M - BOUNDARY_SLACK
}

pub fn registration_metrics(estimates: &[Pose], truth: &[Pose]) -> Result<RegistrationMetrics> {
    if estimates.len() != truth.len() {
        return Err(Error::param(format!(
            "{} estimates for {} ground-truth poses",
            estimates.len(),
            truth.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::UndefinedMetrics("no registrations to evaluate".into()));
    }
    let errors: Vec<(f64, f64)> = estimates.iter().zip(truth).map(|(e, t)| pose_error(e, t)).collect();
    let n = errors.len() as f64;
    Ok(RegistrationMetrics {
        te_mean: errors.iter().map(|e| e.0).sum::<f64>() / n,
        re_mean: errors.iter().map(|e| e.1).sum::<f64>() / n,
        recall: errors.iter().filter(|e| is_registration_success(e.0, e.1)).count() as f64 / n,
        errors,
    })
}

/// Translation RMSE after the rigid alignment of the estimate onto the
/// ground truth.
pub fn ate_rmse(estimated: &[Pose], truth: &[Pose]) -> Result<f64> {
    if estimated.len() != truth.len() {
        return Err(Error::param("trajectories differ in length"));
    }
    if estimated.len() < 3 {
        return Err(Error::param("ATE needs at least 3 pose pairs"));
    }
    let src: Vec<Vector3<f64>> = estimated.iter().map(|p| p.translation()).collect();
    let dst: Vec<Vector3<f64>> = truth.iter().map(|p| p.translation()).collect();
    let align = kabsch(&src, &dst)?;
    let sq: f64 = src.iter().zip(&dst).map(|(s, d)| (align.transform_point(s) - d).norm_squared()).sum();
    Ok((sq / src.len() as f64).sqrt())
}

/// Evaluation summary written by the `eval` command.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub pr_distance: Option<PrCurve>,
    pub pr_inlier: Option<PrCurve>,
    pub registration: Option<RegistrationMetrics>,
    pub ate_rmse: Option<f64>,
    pub ate_rmse_before: Option<f64>,
}

impl EvalReport {
    /// One `key=value` record per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, curve) in [("distance", &self.pr_distance), ("inlier", &self.pr_inlier)] {
            if let Some(c) = curve {
                let _ = writeln!(out, "pr_{name}_f1_max={}", c.f1_max);
                let _ = writeln!(out, "pr_{name}_ap={}", c.average_precision);
                let _ = writeln!(out, "pr_{name}_samples={}", c.samples.len());
            }
        }
        if let Some(r) = &self.registration {
            let _ = writeln!(out, "te_mean_m={}", r.te_mean);
            let _ = writeln!(out, "re_mean_deg={}", r.re_mean);
            let _ = writeln!(out, "registration_recall={}", r.recall);
            let _ = writeln!(out, "registrations={}", r.errors.len());
        }
        if let Some(a) = self.ate_rmse_before {
            let _ = writeln!(out, "ate_rmse_before_m={a}");
        }
        if let Some(a) = self.ate_rmse {
            let _ = writeln!(out, "ate_rmse_m={a}");
        }
        out
    }
}

/// Two-column `recall precision` samples for plotting.
pub fn pr_samples_text(curve: &PrCurve) -> String {
    let mut out = String::from("# recall precision threshold\n");
    for s in &curve.samples {
        let _ = writeln!(out, "{} {} {}", s.recall, s.precision, s.threshold);
    }
    out
}
