use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use super::Pose;
use crate::error::{Error, Result};

/// Ordered set of 3D points (meters) with optional per-point covariances.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    covariances: Option<Vec<Matrix3<f64>>>,
    frame_id: u32,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if let Some(bad) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidGeometry(format!("non-finite point at index {bad}")));
        }
        Ok(Self {
            points,
            covariances: None,
            frame_id: 0,
        })
    }

    pub fn with_frame_id(mut self, frame_id: u32) -> Self {
        self.frame_id = frame_id;
        self
    }

    /// Attaches per-point covariances. Each must be symmetric PSD within 1e-9.
    pub fn with_covariances(mut self, covariances: Vec<Matrix3<f64>>) -> Result<Self> {
        if covariances.len() != self.points.len() {
            return Err(Error::InvalidGeometry(format!(
                "{} covariances for {} points",
                covariances.len(),
                self.points.len()
            )));
        }
        for (i, c) in covariances.iter().enumerate() {
            check_psd(c).map_err(|msg| {
                Error::InvalidGeometry(format!("covariance {i}: {msg}"))
            })?;
        }
        self.covariances = Some(covariances);
        Ok(self)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn covariances(&self) -> Option<&[Matrix3<f64>]> {
        self.covariances.as_deref()
    }

    pub fn frame_id(&self) -> u32 {
        self.frame_id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Vector3<f64>> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vector3<f64> = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }

    /// Centroid and the largest distance from it to any point.
    pub fn bounding_sphere(&self) -> Option<(Vector3<f64>, f64)> {
        let c = self.centroid()?;
        let r = self
            .points
            .iter()
            .map(|p| (p - c).norm())
            .fold(0.0, f64::max);
        Some((c, r))
    }

    pub fn into_points(self) -> Vec<Vector3<f64>> {
        self.points
    }
}

fn check_psd(c: &Matrix3<f64>) -> std::result::Result<(), String> {
    if !c.iter().all(|v| v.is_finite()) {
        return Err("non-finite entry".into());
    }
    let asym = (c - c.transpose()).abs().max();
    if asym > 1e-9 {
        return Err(format!("asymmetry {asym:e}"));
    }
    let min_eig = c.symmetric_eigenvalues().min();
    if min_eig < -1e-9 {
        return Err(format!("negative eigenvalue {min_eig:e}"));
    }
    Ok(())
}

fn voxel_key(p: &Vector3<f64>, leaf: f64) -> (i64, i64, i64) {
    (
        (p.x / leaf).floor() as i64,
        (p.y / leaf).floor() as i64,
        (p.z / leaf).floor() as i64,
    )
}

/// Replaces the points of every occupied voxel by their centroid.
///
/// Output is ordered by voxel key, so it does not depend on the input order
/// beyond floating-point summation order.
pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> Result<PointCloud> {
    if !(leaf > 0.0) || !leaf.is_finite() {
        return Err(Error::param(format!("voxel leaf must be positive, got {leaf}")));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyInput("voxel_downsample on an empty cloud"));
    }
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, usize)> = BTreeMap::new();
    for p in cloud.points() {
        let cell = cells.entry(voxel_key(p, leaf)).or_insert((Vector3::zeros(), 0));
        cell.0 += p;
        cell.1 += 1;
    }
    let points = cells
        .into_values()
        .map(|(sum, n)| sum / n as f64)
        .collect();
    Ok(PointCloud::new(points)?.with_frame_id(cloud.frame_id))
}

/// Applies `p -> R p + t` to every point and `S -> R S R^T` to covariances.
pub fn transform_cloud(cloud: &PointCloud, pose: &Pose) -> PointCloud {
    let r = pose.rotation_matrix();
    let points = cloud.points.iter().map(|p| pose.transform_point(p)).collect();
    let covariances = cloud
        .covariances
        .as_ref()
        .map(|covs| covs.iter().map(|c| r * c * r.transpose()).collect());
    PointCloud {
        points,
        covariances,
        frame_id: cloud.frame_id,
    }
}
