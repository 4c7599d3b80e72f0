//! Keypoint head.
//!
//! Every sparse point gathers `2k` nearest dense points and keeps `k` of
//! them (the `k` nearest, or a seeded random subset with dilation on). Each
//! neighbor is described by its dense feature, its offset expressed in a
//! local reference frame of the group, and its distance. A two-layer MLP
//! followed by a max over channels gives one logit per neighbor; the softmax
//! of the logits weights the neighbors into a keypoint position and an
//! aggregated dense feature. The descriptor MLP maps the sparse feature
//! concatenated with the aggregated feature to a unit-length descriptor.

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::encoder::Hierarchy;
use super::weights::DescriptorNet;
use super::{l2_normalize, leaky_relu, softmax_in_place, FeatureCloud, Features};
use crate::error::{Error, Result};
use crate::geometry::{canonicalize_normal, sample_covariance, sorted_eigen, SpatialIndex};

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointParams {
    /// Neighbors weighted per keypoint; `2k` candidates are gathered.
    pub k: usize,
    pub dilation: bool,
    pub seed: u64,
    /// Dense neighbors used for the keypoint covariance and normal.
    pub covariance_k: usize,
}

impl Default for KeypointParams {
    fn default() -> Self {
        Self {
            k: 64,
            dilation: false,
            seed: 0,
            covariance_k: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointDetection {
    /// Keypoints with pre-attention descriptors.
    pub features: FeatureCloud,
    /// Dense-point indices of each keypoint's neighbor group.
    pub groups: Vec<Vec<usize>>,
    /// Softmax weights aligned with `groups`.
    pub weights: Vec<Vec<f64>>,
}

/// Rows are the axes of a sign-disambiguated local frame: largest spread
/// first, each of the first and last axes flipped to point toward the bulk
/// of the offsets, the middle axis completing a right-handed frame.
pub(crate) fn local_frame(offsets: &[Vector3<f64>]) -> Matrix3<f64> {
    let cov = sample_covariance(offsets.iter()).unwrap_or_else(Matrix3::identity);
    let (_, v) = sorted_eigen(&cov);
    let orient = |axis: Vector3<f64>| {
        let s: f64 = offsets.iter().map(|o| o.dot(&axis)).sum();
        if s < 0.0 {
            -axis
        } else {
            axis
        }
    };
    let e1 = orient(v[2]);
    let e3 = orient(v[0]);
    let e2 = e3.cross(&e1);
    Matrix3::from_rows(&[e1.transpose(), e2.transpose(), e3.transpose()])
}

pub(crate) fn neighbor_group(
    nn: &[usize],
    k: usize,
    dilation: bool,
    seed: u64,
    stream: u64,
) -> Vec<usize> {
    if !dilation || nn.len() <= k {
        return nn[..k.min(nn.len())].to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut pick = rand::seq::index::sample(&mut rng, nn.len(), k).into_vec();
    pick.sort_unstable();
    pick.into_iter().map(|i| nn[i]).collect()
}

/// Neighbor logit: MLP over `[feature, local offset, distance]`, max over
/// output channels.
pub(crate) fn neighbor_logit(net: &DescriptorNet, input: &[f64], hidden: &mut [f64], out: &mut [f64]) -> f64 {
    net.keypoint[0].apply(input, hidden);
    hidden.iter_mut().for_each(|v| *v = leaky_relu(*v));
    net.keypoint[1].apply(hidden, out);
    out.iter().map(|&v| leaky_relu(v)).fold(f64::NEG_INFINITY, f64::max)
}

pub(crate) fn descriptor_head(net: &DescriptorNet, sparse: &[f64], aggregated: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(sparse.len() + aggregated.len());
    x.extend_from_slice(sparse);
    x.extend_from_slice(aggregated);
    let mut h = net.descriptor[0].forward(&x);
    h.iter_mut().for_each(|v| *v = leaky_relu(*v));
    let mut d = net.descriptor[1].forward(&h);
    l2_normalize(&mut d);
    d
}

struct Detected {
    keypoint: Vector3<f64>,
    descriptor: Vec<f64>,
    group: Vec<usize>,
    weights: Vec<f64>,
}

pub fn detect_keypoints(h: &Hierarchy, net: &DescriptorNet, params: &KeypointParams) -> Result<KeypointDetection> {
    let k = params.k;
    if k == 0 {
        return Err(Error::param("keypoint group size k must be positive"));
    }
    if params.covariance_k < 3 {
        return Err(Error::param("covariance neighborhood needs at least 3 points"));
    }
    let dense = &h.dense_points;
    if dense.len() < 2 * k {
        return Err(Error::InsufficientDensity {
            stage: "keypoint detection".into(),
            points: dense.len(),
            required: 2 * k,
        });
    }
    let dd = h.dense_features.dim();
    if net.keypoint[0].in_dim != dd + 4 || net.descriptor[0].in_dim != h.sparse_features.dim() + dd {
        return Err(Error::param("hierarchy feature widths do not match the network"));
    }
    let index = SpatialIndex::from_points(dense.clone());

    let detected: Vec<Detected> = h
        .sparse_points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let nn: Vec<usize> = index.knn(p, 2 * k).iter().map(|n| n.index).collect();
            let group = neighbor_group(&nn, k, params.dilation, params.seed, i as u64);
            let offsets: Vec<Vector3<f64>> = group.iter().map(|&j| dense[j] - p).collect();
            let frame = local_frame(&offsets);
            let mut input = vec![0.0; dd + 4];
            let mut hidden = vec![0.0; net.keypoint[0].out_dim];
            let mut out = vec![0.0; net.keypoint[1].out_dim];
            let mut logits: Vec<f64> = group
                .iter()
                .zip(&offsets)
                .map(|(&j, o)| {
                    input[..dd].copy_from_slice(h.dense_features.row(j));
                    let local = frame * o;
                    input[dd..dd + 3].copy_from_slice(local.as_slice());
                    input[dd + 3] = o.norm();
                    neighbor_logit(net, &input, &mut hidden, &mut out)
                })
                .collect();
            softmax_in_place(&mut logits);
            let weights = logits;
            let mut keypoint = Vector3::zeros();
            let mut aggregated = vec![0.0; dd];
            for (&j, &w) in group.iter().zip(&weights) {
                keypoint += w * dense[j];
                for (a, f) in aggregated.iter_mut().zip(h.dense_features.row(j)) {
                    *a += w * f;
                }
            }
            let descriptor = descriptor_head(net, h.sparse_features.row(i), &aggregated);
            Detected {
                keypoint,
                descriptor,
                group,
                weights,
            }
        })
        .collect();

    let ck = params.covariance_k.min(dense.len());
    let mut keypoints = Vec::with_capacity(detected.len());
    let mut covariances = Vec::with_capacity(detected.len());
    let mut normals = Vec::with_capacity(detected.len());
    let mut rows = Vec::with_capacity(detected.len());
    let mut groups = Vec::with_capacity(detected.len());
    let mut weights = Vec::with_capacity(detected.len());
    for d in detected {
        let nn = index.knn(&d.keypoint, ck);
        let cov = sample_covariance(nn.iter().map(|n| &dense[n.index])).unwrap_or_else(Matrix3::zeros);
        let (_, v) = sorted_eigen(&cov);
        keypoints.push(d.keypoint);
        covariances.push(cov);
        normals.push(canonicalize_normal(v[0]));
        rows.push(d.descriptor);
        groups.push(d.group);
        weights.push(d.weights);
    }
    let descriptors = Features::from_rows(net.arch.descriptor_dim, &rows)?;
    Ok(KeypointDetection {
        features: FeatureCloud::new(keypoints, descriptors, covariances, normals)?,
        groups,
        weights,
    })
}
