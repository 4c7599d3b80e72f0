//! Multi-session LiDAR map merging.
//!
//! Keyframe clouds are turned into keypoints with geometric descriptors,
//! matched across sessions to find loop closures, registered with SVD and
//! GICP, filtered by gating and pairwise consistency, and finally fused in a
//! joint factor graph that also carries scan-matching-cost factors.

pub mod config;
pub mod descriptor;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod verification;

pub use error::{Error, Result};
pub use geometry::{PointCloud, Pose, SpatialIndex};
