//! Forward-only descriptor network.
//!
//! A voxel-pyramid encoder produces sparse and dense point features, a
//! keypoint head moves every sparse point to a learned convex combination of
//! its dense neighbors, and a stack of geometric self-attention layers mixes
//! in plane-aware context between keypoints.

mod attention;
mod embedding;
mod encoder;
mod geometric;
mod keypoints;
mod weights;

use nalgebra::{Matrix3, Vector3};

pub use attention::{plane_attention, plane_attention_with_budget, EMBEDDING_CACHE_BYTES};
pub use embedding::{
    pairwise_geometric_embedding, sinusoidal_embed, EmbeddingBetas, GeometricEmbedding,
    PairGeometry,
};
pub use encoder::{build_levels, encode_hierarchy, encode_levels, encoder_stage, Hierarchy, GEO_STATS};
pub use keypoints::{detect_keypoints, KeypointDetection, KeypointParams};
pub use weights::{Architecture, DescriptorNet, Linear, Tensor, WeightBundle};

use crate::error::{Error, Result};
use crate::geometry::{voxel_downsample, PointCloud};

/// Dense row-major matrix, one row per point.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    dim: usize,
    data: Vec<f64>,
}

impl Features {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::param(format!("row {i} has {} values, expected {dim}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { dim, data })
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::param(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Rows reordered so that output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = Vec::with_capacity(self.data.len());
        for &p in perm {
            out.extend_from_slice(self.row(p));
        }
        Self {
            dim: self.dim,
            data: out,
        }
    }
}

/// Keypoints of one keyframe with their descriptors, local covariances and
/// surface normals.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCloud {
    pub keypoints: Vec<Vector3<f64>>,
    pub descriptors: Features,
    pub covariances: Vec<Matrix3<f64>>,
    pub normals: Vec<Vector3<f64>>,
}

impl FeatureCloud {
    pub fn new(
        keypoints: Vec<Vector3<f64>>,
        descriptors: Features,
        covariances: Vec<Matrix3<f64>>,
        normals: Vec<Vector3<f64>>,
    ) -> Result<Self> {
        let n = keypoints.len();
        if descriptors.len() != n || covariances.len() != n || normals.len() != n {
            return Err(Error::Data(format!(
                "feature cloud counts differ: {n} keypoints, {} descriptors, {} covariances, {} normals",
                descriptors.len(),
                covariances.len(),
                normals.len()
            )));
        }
        if let Some(i) = normals.iter().position(|v| (v.norm() - 1.0).abs() > 1e-6) {
            return Err(Error::Data(format!("normal {i} is not unit length")));
        }
        Ok(Self {
            keypoints,
            descriptors,
            covariances,
            normals,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.dim()
    }

    pub fn with_descriptors(mut self, descriptors: Features) -> Result<Self> {
        if descriptors.len() != self.len() {
            return Err(Error::Data("descriptor count mismatch".into()));
        }
        self.descriptors = descriptors;
        Ok(self)
    }
}

/// Settings of a full forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractParams {
    pub voxel_leaf: f64,
    pub keypoint: KeypointParams,
    pub betas: EmbeddingBetas,
    pub attention_layers: usize,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            voxel_leaf: 0.3,
            keypoint: KeypointParams::default(),
            betas: EmbeddingBetas::default(),
            attention_layers: 3,
        }
    }
}

/// Full pipeline from a raw keyframe cloud to final descriptors.
pub fn extract_features(
    cloud: &PointCloud,
    net: &DescriptorNet,
    params: &ExtractParams,
) -> Result<FeatureCloud> {
    let base = voxel_downsample(cloud, params.voxel_leaf)?;
    let hierarchy = encode_hierarchy(&base, net, params.voxel_leaf)?;
    let detection = detect_keypoints(&hierarchy, net, &params.keypoint)?;
    let embedding = pairwise_geometric_embedding(&detection.features, net, &params.betas)?;
    let descriptors = plane_attention(
        &detection.features,
        &embedding,
        net,
        params.attention_layers,
    )?;
    detection.features.with_descriptors(descriptors)
}

pub(crate) fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        0.1 * x
    }
}

pub(crate) fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}
