//! Point clouds, rigid transforms and neighborhood queries.

mod cloud;
mod kdtree;
mod normals;
mod pose;

pub use cloud::{transform_cloud, voxel_downsample, PointCloud};
pub use kdtree::{Neighbor, SpatialIndex};
pub use normals::{
    canonicalize_normal, covariance_normal_of, estimate_covariance_normal, regularized_covariances,
    sample_covariance, sorted_eigen, with_gicp_covariances, PLANE_EPSILON,
};
pub use pose::{
    inverse_left_jacobian_so3, left_jacobian_so3, skew, small_adjoint, Pose, Tangent,
};
