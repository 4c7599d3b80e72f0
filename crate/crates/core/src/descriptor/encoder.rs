//! Voxel-pyramid encoder and nearest-neighbor decoder.
//!
//! Level 0 is the input cloud (already voxelized at the base leaf); level `s`
//! is level `s - 1` voxelized at `leaf * 2^s`. Stage `s` computes a feature
//! for every level-`s` point from the level-`s - 1` points within
//! `2.5 * leaf * 2^s` (level 0 aggregates over itself): the mean neighbor
//! feature, concatenated with [`GEO_STATS`] rotation-invariant statistics of
//! the neighborhood, goes through a linear map and a leaky ReLU.
//!
//! The decoder walks back up to level 1: the coarser decoded feature of the
//! nearest coarser point is concatenated with the level's own encoder
//! feature and mapped linearly. Level 1 gives the dense points and features,
//! the top level gives the sparse ones.

use nalgebra::{Matrix3, Vector3};

use super::weights::{DescriptorNet, Linear};
use super::{leaky_relu, Features};
use crate::error::{Error, Result};
use crate::geometry::{voxel_downsample, PointCloud, SpatialIndex};

/// Neighborhood statistics appended to the aggregated feature:
/// `ln(1 + count) / 4`, mean offset length over radius, and the three
/// ascending eigenvalues of the offset covariance over radius squared.
pub const GEO_STATS: usize = 5;

const RADIUS_FACTOR: f64 = 2.5;
const MIN_LEVEL_POINTS: usize = 4;

/// Encoder and decoder outputs for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    pub leaf: f64,
    pub levels: Vec<Vec<Vector3<f64>>>,
    /// Encoder output per level.
    pub encoded: Vec<Features>,
    pub dense_points: Vec<Vector3<f64>>,
    pub dense_features: Features,
    pub sparse_points: Vec<Vector3<f64>>,
    pub sparse_features: Features,
}

/// Point sets of every pyramid level.
pub fn build_levels(base: &PointCloud, leaf: f64, stages: usize) -> Result<Vec<Vec<Vector3<f64>>>> {
    if stages < 2 {
        return Err(Error::param(format!("need at least 2 encoder stages, got {stages}")));
    }
    let mut levels = vec![base.points().to_vec()];
    let mut current = base.clone();
    for s in 1..stages {
        if current.len() < MIN_LEVEL_POINTS {
            break;
        }
        current = voxel_downsample(&current, leaf * (1 << s) as f64)?;
        levels.push(current.points().to_vec());
    }
    for (s, pts) in levels.iter().enumerate() {
        if pts.len() < MIN_LEVEL_POINTS {
            return Err(Error::InsufficientDensity {
                stage: format!("encoder level {s}"),
                points: pts.len(),
                required: MIN_LEVEL_POINTS,
            });
        }
    }
    Ok(levels)
}

fn neighborhood_stats(center: &Vector3<f64>, neighbors: &[Vector3<f64>], radius: f64) -> [f64; GEO_STATS] {
    let c = neighbors.len();
    let mut out = [0.0; GEO_STATS];
    out[0] = (1.0 + c as f64).ln() / 4.0;
    if c == 0 {
        return out;
    }
    let mut mean = Vector3::zeros();
    let mut mean_len = 0.0;
    for p in neighbors {
        let o = p - center;
        mean += o;
        mean_len += o.norm();
    }
    mean /= c as f64;
    out[1] = mean_len / c as f64 / radius;
    let mut cov = Matrix3::zeros();
    for p in neighbors {
        let d = p - center - mean;
        cov += d * d.transpose();
    }
    cov /= c as f64;
    let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
    eig.sort_by(f64::total_cmp);
    let r2 = radius * radius;
    for k in 0..3 {
        out[2 + k] = eig[k] / r2;
    }
    out
}

/// One encoder stage: features for `coarse` points aggregated from `fine`.
pub fn encoder_stage(
    fine_points: &[Vector3<f64>],
    fine_features: &Features,
    coarse_points: &[Vector3<f64>],
    radius: f64,
    layer: &Linear,
) -> Result<Features> {
    let dim = fine_features.dim();
    if fine_features.len() != fine_points.len() {
        return Err(Error::param("fine point and feature counts differ"));
    }
    if layer.in_dim != dim + GEO_STATS {
        return Err(Error::param(format!(
            "stage layer expects {} inputs, features have {dim} + {GEO_STATS}",
            layer.in_dim
        )));
    }
    let index = SpatialIndex::from_points(fine_points.to_vec());
    let mut out = Features::zeros(coarse_points.len(), layer.out_dim);
    let mut input = vec![0.0; dim + GEO_STATS];
    let mut neighbors = Vec::new();
    for (i, p) in coarse_points.iter().enumerate() {
        let nn = index.within_radius(p, radius);
        input.iter_mut().for_each(|v| *v = 0.0);
        neighbors.clear();
        for n in &nn {
            neighbors.push(fine_points[n.index]);
            for (acc, f) in input[..dim].iter_mut().zip(fine_features.row(n.index)) {
                *acc += f;
            }
        }
        if !nn.is_empty() {
            let inv = 1.0 / nn.len() as f64;
            input[..dim].iter_mut().for_each(|v| *v *= inv);
        }
        input[dim..].copy_from_slice(&neighborhood_stats(p, &neighbors, radius));
        let row = out.row_mut(i);
        layer.apply(&input, row);
        row.iter_mut().for_each(|v| *v = leaky_relu(*v));
    }
    Ok(out)
}

/// Runs encoder and decoder over precomputed pyramid levels.
pub fn encode_levels(levels: &[Vec<Vector3<f64>>], net: &DescriptorNet, leaf: f64) -> Result<Hierarchy> {
    let stages = net.arch.stages();
    if levels.len() != stages {
        return Err(Error::param(format!(
            "{} levels for a {stages}-stage encoder",
            levels.len()
        )));
    }
    let mut encoded: Vec<Features> = Vec::with_capacity(stages);
    let ones = Features::from_flat(1, vec![1.0; levels[0].len()])?;
    for s in 0..stages {
        let radius = RADIUS_FACTOR * leaf * (1 << s) as f64;
        let (fine_pts, fine_feat) = if s == 0 {
            (&levels[0], &ones)
        } else {
            (&levels[s - 1], &encoded[s - 1])
        };
        let f = encoder_stage(fine_pts, fine_feat, &levels[s], radius, &net.encoder[s])?;
        encoded.push(f);
    }

    let mut decoded = encoded[stages - 1].clone();
    for l in (1..stages - 1).rev() {
        let layer = net.decoder[l].as_ref().expect("decoder layer");
        let coarse = SpatialIndex::from_points(levels[l + 1].clone());
        let mut next = Features::zeros(levels[l].len(), layer.out_dim);
        let mut input = Vec::with_capacity(layer.in_dim);
        for (i, p) in levels[l].iter().enumerate() {
            let nn = coarse.nearest(p).expect("non-empty level");
            input.clear();
            input.extend_from_slice(decoded.row(nn.index));
            input.extend_from_slice(encoded[l].row(i));
            let row = next.row_mut(i);
            layer.apply(&input, row);
            row.iter_mut().for_each(|v| *v = leaky_relu(*v));
        }
        decoded = next;
    }

    Ok(Hierarchy {
        leaf,
        dense_points: levels[1].clone(),
        dense_features: decoded,
        sparse_points: levels[stages - 1].clone(),
        sparse_features: encoded[stages - 1].clone(),
        levels: levels.to_vec(),
        encoded,
    })
}

/// Builds the pyramid from a cloud voxelized at `leaf` and encodes it.
pub fn encode_hierarchy(base: &PointCloud, net: &DescriptorNet, leaf: f64) -> Result<Hierarchy> {
    if !(leaf > 0.0) {
        return Err(Error::param(format!("voxel leaf must be positive, got {leaf}")));
    }
    let levels = build_levels(base, leaf, net.arch.stages())?;
    encode_levels(&levels, net, leaf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{Architecture, WeightBundle};
    use crate::geometry::Pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        Architecture {
            encoder_dims: vec![4, 6, 8],
            keypoint_hidden: 5,
            descriptor_dim: 8,
            attention_layers: 1,
        }
    }

    fn plane(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| Vector3::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(-0.05..0.05)))
            .collect();
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn constant_input_with_selector_weights_is_constant() {
        let cloud = voxel_downsample(&plane(500, 1), 0.3).unwrap();
        let pts = cloud.points().to_vec();
        let ones = Features::from_flat(1, vec![1.0; pts.len()]).unwrap();
        // passes the mean feature through and ignores the statistics
        let mut w = vec![0.0; 3 * (1 + GEO_STATS)];
        for r in 0..3 {
            w[r * (1 + GEO_STATS)] = 1.0;
        }
        let layer = Linear::new(3, 1 + GEO_STATS, w, vec![0.0; 3]);
        let out = encoder_stage(&pts, &ones, &pts, 0.75, &layer).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stage_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let fine: Vec<_> = (0..300)
            .map(|_| Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let coarse: Vec<_> = fine.iter().step_by(7).copied().collect();
        let feats = Features::from_flat(2, (0..600).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let layer = Linear::new(
            4,
            2 + GEO_STATS,
            (0..4 * (2 + GEO_STATS)).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            vec![0.1; 4],
        );
        let t = Pose::from_axis_angle(&Vector3::new(0.3, -0.5, 1.0), 1.1, Vector3::new(4.0, -2.0, 7.0));
        let tf = |v: &[Vector3<f64>]| v.iter().map(|p| t.transform_point(p)).collect::<Vec<_>>();
        let a = encoder_stage(&fine, &feats, &coarse, 1.0, &layer).unwrap();
        let b = encoder_stage(&tf(&fine), &feats, &tf(&coarse), 1.0, &layer).unwrap();
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    /// Straight-line recurrence with brute-force neighborhoods.
    fn reference(levels: &[Vec<Vector3<f64>>], net: &DescriptorNet, leaf: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let stages = levels.len();
        let mut enc: Vec<Vec<Vec<f64>>> = Vec::new();
        for s in 0..stages {
            let r = 2.5 * leaf * 2f64.powi(s as i32);
            let (fp, ff): (&Vec<Vector3<f64>>, Vec<Vec<f64>>) = if s == 0 {
                (&levels[0], vec![vec![1.0]; levels[0].len()])
            } else {
                (&levels[s - 1], enc[s - 1].clone())
            };
            let lin = &net.encoder[s];
            let mut out = Vec::new();
            for p in &levels[s] {
                let idx: Vec<usize> = (0..fp.len()).filter(|&j| (fp[j] - p).norm_squared() <= r * r).collect();
                let d = ff[0].len();
                let mut x = vec![0.0; d];
                for &j in &idx {
                    for c in 0..d {
                        x[c] += ff[j][c] / idx.len() as f64;
                    }
                }
                let offs: Vec<Vector3<f64>> = idx.iter().map(|&j| fp[j] - p).collect();
                let m: Vector3<f64> = offs.iter().sum::<Vector3<f64>>() / offs.len() as f64;
                let cov = offs.iter().map(|o| (o - m) * (o - m).transpose()).sum::<Matrix3<f64>>() / offs.len() as f64;
                let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
                ev.sort_by(f64::total_cmp);
                x.push(((idx.len() + 1) as f64).ln() / 4.0);
                x.push(offs.iter().map(|o| o.norm()).sum::<f64>() / offs.len() as f64 / r);
                x.extend(ev.iter().map(|e| e / (r * r)));
                out.push(lin.forward(&x).into_iter().map(leaky_relu).collect());
            }
            enc.push(out);
        }
        let mut dec = enc[stages - 1].clone();
        for l in (1..stages - 1).rev() {
            let lin = net.decoder[l].as_ref().unwrap();
            dec = levels[l]
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let j = (0..levels[l + 1].len())
                        .min_by(|&a, &b| {
                            (levels[l + 1][a] - p)
                                .norm_squared()
                                .total_cmp(&(levels[l + 1][b] - p).norm_squared())
                        })
                        .unwrap();
                    let mut x = dec[j].clone();
                    x.extend_from_slice(&enc[l][i]);
                    lin.forward(&x).into_iter().map(leaky_relu).collect()
                })
                .collect();
        }
        (enc[stages - 1].clone(), dec)
    }

    #[test]
    fn matches_reference_forward_pass() {
        let arch = small_arch();
        let net = DescriptorNet::from_bundle(&WeightBundle::synthesize(&arch, 9).unwrap(), &arch).unwrap();
        let base = voxel_downsample(&plane(500, 2), 0.3).unwrap();
        let h = encode_hierarchy(&base, &net, 0.3).unwrap();
        let (sparse, dense) = reference(&h.levels, &net, 0.3);
        assert_eq!(h.sparse_features.len(), sparse.len());
        assert_eq!(h.dense_features.len(), dense.len());
        for (i, row) in sparse.iter().enumerate() {
            for (a, b) in h.sparse_features.row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        for (i, row) in dense.iter().enumerate() {
            for (a, b) in h.dense_features.row(i).iter().zip(row) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn level_sizes_follow_voxel_counts() {
        let base = voxel_downsample(&plane(2000, 3), 0.3).unwrap();
        let levels = build_levels(&base, 0.3, 3).unwrap();
        assert_eq!(levels[0].len(), base.len());
        let l1 = voxel_downsample(&base, 0.6).unwrap();
        assert_eq!(levels[1].len(), l1.len());
        assert_eq!(levels[2].len(), voxel_downsample(&l1, 1.2).unwrap().len());
    }

    #[test]
    fn sparse_input_is_rejected() {
        let arch = small_arch();
        let net = DescriptorNet::synthesize(&arch, 0).unwrap();
        let tiny = PointCloud::new(vec![Vector3::zeros(), Vector3::x(), Vector3::y()]).unwrap();
        assert!(matches!(
            encode_hierarchy(&tiny, &net, 0.3),
            Err(Error::InsufficientDensity { .. })
        ));
    }
}
