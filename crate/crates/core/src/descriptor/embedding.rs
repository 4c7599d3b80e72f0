//! Pairwise geometric embeddings between keypoints.
//!
//! Four scalar relations are embedded sinusoidally for every ordered pair
//! `(i, j)`:
//!
//! - Mahalanobis distance `d = dp^T (S_i + S_j)^-1 dp`
//! - Euclidean distance `|dp|`
//! - normal angle `acos(|n_i . n_j|)`
//! - triplet angles between `p_j - p_i` and `p_m - p_i` for the three
//!   keypoints `m` nearest to `i`, embedded one by one and max-pooled.
//!
//! The combined embedding is the sum of the four projected terms.

use nalgebra::{Matrix3, Vector3};

use super::weights::{DescriptorNet, Linear};
use super::FeatureCloud;
use crate::error::{Error, Result};
use crate::geometry::SpatialIndex;

const TRIPLET_NEIGHBORS: usize = 3;

/// Sensitivities of the four sinusoidal embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmbeddingBetas {
    pub distance: f64,
    pub euclidean: f64,
    pub normal: f64,
    pub angle: f64,
}

impl Default for EmbeddingBetas {
    fn default() -> Self {
        let per_15_deg = 1.0 / 15f64.to_radians();
        Self {
            distance: 1.0 / 4.8,
            euclidean: 1.0 / 4.8,
            normal: per_15_deg,
            angle: per_15_deg,
        }
    }
}

impl EmbeddingBetas {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [
            ("distance", self.distance),
            ("euclidean", self.euclidean),
            ("normal", self.normal),
            ("angle", self.angle),
        ] {
            if !(b > 0.0) || !b.is_finite() {
                return Err(Error::param(format!("beta_{name} must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Frequencies `1 / c_k` with `c_k = 10000^(2k / dim)`.
fn inverse_periods(dim: usize) -> Vec<f64> {
    (0..dim / 2)
        .map(|k| 10000f64.powf(-((2 * k) as f64) / dim as f64))
        .collect()
}

fn embed_with(value: f64, beta: f64, inv: &[f64], out: &mut [f64]) {
    for (k, f) in inv.iter().enumerate() {
        let (s, c) = (beta * value * f).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
}

/// `[sin(b v / c_0), cos(b v / c_0), sin(b v / c_1), ...]` of length `dim`.
pub fn sinusoidal_embed(value: f64, beta: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::param(format!("embedding dimension must be even, got {dim}")));
    }
    if !(beta > 0.0) {
        return Err(Error::param(format!("beta must be positive, got {beta}")));
    }
    let mut out = vec![0.0; dim];
    embed_with(value, beta, &inverse_periods(dim), &mut out);
    Ok(out)
}

/// Scalar relations of one ordered keypoint pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairGeometry {
    pub mahalanobis: f64,
    pub euclidean: f64,
    pub normal_angle: f64,
    /// Triplet angles; only the first `GeometricEmbedding::triplet_count`
    /// entries are meaningful.
    pub triplet: [f64; TRIPLET_NEIGHBORS],
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let cross = a.cross(b).norm();
    let dot = a.dot(b);
    if cross == 0.0 && dot == 0.0 {
        0.0
    } else {
        cross.atan2(dot)
    }
}

fn mahalanobis(delta: &Vector3<f64>, s: &Matrix3<f64>) -> f64 {
    let chol = s
        .cholesky()
        .or_else(|| (s + Matrix3::identity() * 1e-6).cholesky());
    match chol {
        Some(c) => delta.dot(&c.solve(delta)),
        // covariances that are not PSD at all; fall back to the identity
        None => delta.norm_squared(),
    }
}

/// Pairwise relations of a [`FeatureCloud`] plus the projections that turn
/// their sinusoidal embeddings into `epsilon_ij`.
#[derive(Clone, Debug)]
pub struct GeometricEmbedding {
    n: usize,
    dim: usize,
    betas: EmbeddingBetas,
    inv: Vec<f64>,
    triplet_count: usize,
    pairs: Vec<PairGeometry>,
    projections: [Linear; 4],
}

impl GeometricEmbedding {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn betas(&self) -> &EmbeddingBetas {
        &self.betas
    }

    pub fn triplet_count(&self) -> usize {
        self.triplet_count
    }

    pub fn pair(&self, i: usize, j: usize) -> &PairGeometry {
        &self.pairs[i * self.n + j]
    }

    pub fn projections(&self) -> &[Linear; 4] {
        &self.projections
    }

    /// Sinusoidal terms (Mahalanobis, Euclidean, normal, triplet) written
    /// back to back into `out`, which must hold `4 * dim` values.
    pub fn raw_terms_into(&self, i: usize, j: usize, out: &mut [f64]) {
        let d = self.dim;
        let g = self.pair(i, j);
        let b = &self.betas;
        embed_with(g.mahalanobis, b.distance, &self.inv, &mut out[..d]);
        embed_with(g.euclidean, b.euclidean, &self.inv, &mut out[d..2 * d]);
        embed_with(g.normal_angle, b.normal, &self.inv, &mut out[2 * d..3 * d]);
        let angles = &g.triplet[..self.triplet_count.max(1)];
        let pooled = &mut out[3 * d..];
        for (k, f) in self.inv.iter().enumerate() {
            let (mut s_max, mut c_max) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &a in angles {
                let (s, c) = (b.angle * a * f).sin_cos();
                s_max = s_max.max(s);
                c_max = c_max.max(c);
            }
            pooled[2 * k] = s_max;
            pooled[2 * k + 1] = c_max;
        }
    }

    /// Entry `idx` of the concatenated raw terms, `idx < 4 * dim`.
    pub fn raw_term(&self, i: usize, j: usize, idx: usize) -> f64 {
        let d = self.dim;
        let g = self.pair(i, j);
        let b = &self.betas;
        let (t, c) = (idx / d, idx % d);
        let f = self.inv[c / 2];
        let trig = |x: f64| if c % 2 == 0 { x.sin() } else { x.cos() };
        match t {
            0 => trig(b.distance * g.mahalanobis * f),
            1 => trig(b.euclidean * g.euclidean * f),
            2 => trig(b.normal * g.normal_angle * f),
            _ => g.triplet[..self.triplet_count.max(1)]
                .iter()
                .map(|&a| trig(b.angle * a * f))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn raw_terms(&self, i: usize, j: usize) -> Vec<f64> {
        let mut out = vec![0.0; 4 * self.dim];
        self.raw_terms_into(i, j, &mut out);
        out
    }

    /// Combined embedding `epsilon_ij`.
    pub fn epsilon(&self, i: usize, j: usize) -> Vec<f64> {
        let d = self.dim;
        let raw = self.raw_terms(i, j);
        let mut out = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        for (t, proj) in self.projections.iter().enumerate() {
            proj.apply(&raw[t * d..(t + 1) * d], &mut tmp);
            out.iter_mut().zip(&tmp).for_each(|(o, v)| *o += v);
        }
        out
    }
}

pub fn pairwise_geometric_embedding(
    fc: &FeatureCloud,
    net: &DescriptorNet,
    betas: &EmbeddingBetas,
) -> Result<GeometricEmbedding> {
    betas.validate()?;
    let n = fc.len();
    if n == 0 {
        return Err(Error::EmptyInput("geometric embedding of an empty feature cloud"));
    }
    let dim = net.arch.descriptor_dim;
    let pts = &fc.keypoints;

    let index = SpatialIndex::from_points(pts.clone());
    let triplet_count = TRIPLET_NEIGHBORS.min(n - 1);
    let near: Vec<Vec<usize>> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            index
                .knn(p, triplet_count + 1)
                .into_iter()
                .map(|nb| nb.index)
                .filter(|&m| m != i)
                .take(triplet_count)
                .collect()
        })
        .collect();

    let mut pairs = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let delta = pts[j] - pts[i];
            let s = fc.covariances[i] + fc.covariances[j];
            let cos = fc.normals[i].dot(&fc.normals[j]).abs().min(1.0);
            let mut triplet = [0.0; TRIPLET_NEIGHBORS];
            for (slot, &m) in triplet.iter_mut().zip(&near[i]) {
                *slot = angle_between(&delta, &(pts[m] - pts[i]));
            }
            pairs.push(PairGeometry {
                mahalanobis: if i == j { 0.0 } else { mahalanobis(&delta, &s) },
                euclidean: delta.norm(),
                normal_angle: if i == j { 0.0 } else { cos.acos() },
                triplet,
            });
        }
    }
    Ok(GeometricEmbedding {
        n,
        dim,
        betas: *betas,
        inv: inverse_periods(dim),
        triplet_count,
        pairs,
        projections: net.embedding.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{Architecture, Features};
    use crate::geometry::Pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, dim: usize, seed: u64) -> FeatureCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kps: Vec<_> = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let covs = (0..n)
            .map(|_| {
                let a = Matrix3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
                a * a.transpose() + Matrix3::identity() * 0.01
            })
            .collect();
        let normals = (0..n)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize())
            .collect();
        let desc = Features::from_flat(dim, vec![0.0; n * dim]).unwrap();
        FeatureCloud::new(kps, desc, covs, normals).unwrap()
    }

    fn net(dim: usize) -> DescriptorNet {
        let arch = Architecture {
            encoder_dims: vec![4, 6, 8],
            keypoint_hidden: 4,
            descriptor_dim: dim,
            attention_layers: 1,
        };
        DescriptorNet::synthesize(&arch, 3).unwrap()
    }

    #[test]
    fn sinusoid_reference_values() {
        let z = sinusoidal_embed(0.0, 1.0, 8).unwrap();
        assert_eq!(z, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let q = sinusoidal_embed(std::f64::consts::FRAC_PI_2, 1.0, 4).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-15 && q[1].abs() < 1e-15);
        let v = sinusoidal_embed(4.8, 1.0 / 4.8, 4).unwrap();
        let c1 = 10000f64.powf(0.5);
        let expected = [1f64.sin(), 1f64.cos(), (1.0 / c1).sin(), (1.0 / c1).cos()];
        for (a, b) in v.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(sinusoidal_embed(1.0, 1.0, 3).is_err());
        assert!(sinusoidal_embed(1.0, 0.0, 4).is_err());
    }

    #[test]
    fn diagonal_pairs_embed_zero() {
        let fc = random_cloud(6, 16, 1);
        let nt = net(16);
        let e = pairwise_geometric_embedding(&fc, &nt, &EmbeddingBetas::default()).unwrap();
        let pattern: Vec<f64> = (0..16).map(|k| (k % 2) as f64).collect();
        for i in 0..6 {
            let raw = e.raw_terms(i, i);
            for t in 0..4 {
                assert_eq!(&raw[t * 16..(t + 1) * 16], pattern.as_slice());
            }
            let mut expected = vec![0.0; 16];
            for p in &nt.embedding {
                for (x, y) in expected.iter_mut().zip(p.forward(&pattern)) {
                    *x += y;
                }
            }
            for (a, b) in e.epsilon(i, i).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_identity_covariances_give_squared_distance() {
        let mut fc = random_cloud(5, 8, 2);
        fc.covariances.iter_mut().for_each(|c| *c = Matrix3::identity() * 0.5);
        let e = pairwise_geometric_embedding(&fc, &net(8), &EmbeddingBetas::default()).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let d2 = (fc.keypoints[i] - fc.keypoints[j]).norm_squared();
                assert!((e.pair(i, j).mahalanobis - d2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_covariances_are_regularized() {
        let mut fc = random_cloud(3, 8, 3);
        fc.covariances.iter_mut().for_each(|c| *c = Matrix3::zeros());
        let e = pairwise_geometric_embedding(&fc, &net(8), &EmbeddingBetas::default()).unwrap();
        let d2 = (fc.keypoints[0] - fc.keypoints[1]).norm_squared();
        assert!((e.pair(0, 1).mahalanobis - d2 * 1e6).abs() < 1e-3 * d2 * 1e6);
    }

    #[test]
    fn invariant_under_rigid_motion() {
        let nt = net(32);
        for seed in 0..5 {
            let fc = random_cloud(10, 32, seed);
            let t = Pose::from_axis_angle(&Vector3::new(1.0, 2.0, -0.5), 0.4 + seed as f64, Vector3::new(3.0, -1.0, 8.0));
            let r = t.rotation_matrix();
            let moved = FeatureCloud::new(
                fc.keypoints.iter().map(|p| t.transform_point(p)).collect(),
                fc.descriptors.clone(),
                fc.covariances.iter().map(|c| r * c * r.transpose()).collect(),
                fc.normals.iter().map(|n| r * n).collect(),
            )
            .unwrap();
            let a = pairwise_geometric_embedding(&fc, &nt, &EmbeddingBetas::default()).unwrap();
            let b = pairwise_geometric_embedding(&moved, &nt, &EmbeddingBetas::default()).unwrap();
            for i in 0..10 {
                for j in 0..10 {
                    for (x, y) in a.epsilon(i, j).iter().zip(b.epsilon(i, j)) {
                        assert!((x - y).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn triplet_term_is_max_pooled() {
        let fc = random_cloud(7, 8, 9);
        let betas = EmbeddingBetas::default();
        let e = pairwise_geometric_embedding(&fc, &net(8), &betas).unwrap();
        let raw = e.raw_terms(2, 5);
        let g = e.pair(2, 5);
        let mut pooled = vec![f64::NEG_INFINITY; 8];
        for &a in &g.triplet[..3] {
            for (p, v) in pooled.iter_mut().zip(sinusoidal_embed(a, betas.angle, 8).unwrap()) {
                *p = p.max(v);
            }
        }
        assert_eq!(&raw[24..32], pooled.as_slice());
        for (idx, v) in raw.iter().enumerate() {
            assert_eq!(e.raw_term(2, 5, idx), *v);
        }
        assert!(raw.iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
