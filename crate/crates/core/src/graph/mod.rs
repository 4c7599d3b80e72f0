//! Multi-session factor graph.

mod optimizer;
mod scan;
mod session;

pub use optimizer::{
    initial_poses, loop_factor, loop_information, optimize, optimize_from, MergedMap, OptimizerParams,
    RelativePoseFactor,
};
pub use scan::{
    compute_overlap, correspondence_jacobians, correspondence_residual, linearize_scan_match,
    place_scan_match_factors, KeyframeCloud, OverlapPair, ScanLinearization, ScanMatchFactor,
};
pub use session::{
    BetweenFactor, GraphFile, InterSessionEdge, Keyframe, KeyframeId, NodeId, SessionGraph, SessionId,
};
