//! Descriptor-space loop detection and two-stage registration.

mod distance;
mod gicp;
mod svd;

pub use distance::{
    candidate_distances, detect_loop, inter_scan_distance, select_correspondences, Correspondence,
    DistanceMatrix, Entry, LoopMatch,
};
pub use gicp::{gicp_refine, inlier_ratio, AcceptedStep, GicpParams, RegistrationResult};
pub use svd::{kabsch, svd_align};
