//! Training losses and evaluation metrics.

mod eval;
mod losses;

pub use eval::{
    ate_rmse, is_registration_success, pose_error, pr_curve, pr_samples_text, registration_metrics, EvalReport,
    PrCurve, PrSample, RegistrationMetrics, RE_SUCCESS_DEG, TE_SUCCESS_M,
};
pub use losses::{chamfer_loss, circle_loss, transformation_loss, CircleLoss, CircleParams, PatchOverlap};
