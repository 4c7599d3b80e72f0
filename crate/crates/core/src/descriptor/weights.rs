//! Weight bundles and the `GMLDW1` weight file.
//!
//! File layout: the 6-byte magic `GMLDW1`, then tensor records until end of
//! file. A record is `name_len: u16`, `name: utf-8`, `rank: u8`,
//! `dims: rank x u32`, then `prod(dims)` row-major `f32` values. All integers
//! and floats are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::encoder::GEO_STATS;
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"GMLDW1";

/// Layer sizes of the descriptor network.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    /// Encoder feature width per pyramid level; its length is the stage count.
    pub encoder_dims: Vec<usize>,
    pub keypoint_hidden: usize,
    pub descriptor_dim: usize,
    pub attention_layers: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder_dims: vec![32, 64, 128],
            keypoint_hidden: 64,
            descriptor_dim: 256,
            attention_layers: 3,
        }
    }
}

impl Architecture {
    pub fn stages(&self) -> usize {
        self.encoder_dims.len()
    }

    pub fn sparse_dim(&self) -> usize {
        *self.encoder_dims.last().unwrap()
    }

    /// Width of the dense (first downsampled level) features.
    pub fn dense_dim(&self) -> usize {
        self.encoder_dims[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages() < 2 {
            return Err(Error::param("the encoder needs at least two stages"));
        }
        if self.encoder_dims.contains(&0) || self.keypoint_hidden == 0 || self.attention_layers == 0 {
            return Err(Error::param("layer widths and counts must be positive"));
        }
        if self.descriptor_dim == 0 || self.descriptor_dim % 2 != 0 {
            return Err(Error::param(format!(
                "descriptor dimension must be even and positive, got {}",
                self.descriptor_dim
            )));
        }
        Ok(())
    }

    /// Every tensor the network needs, in canonical order, with its shape.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut linear = |name: String, rows: usize, cols: usize| {
            out.push((format!("{name}.weight"), vec![rows, cols]));
            out.push((format!("{name}.bias"), vec![rows]));
        };
        let dims = &self.encoder_dims;
        for (s, &d) in dims.iter().enumerate() {
            let input = if s == 0 { 1 } else { dims[s - 1] };
            linear(format!("encoder.{s}"), d, input + GEO_STATS);
        }
        for l in (1..self.stages() - 1).rev() {
            linear(format!("decoder.{l}"), dims[l], dims[l + 1] + dims[l]);
        }
        let h = self.keypoint_hidden;
        linear("keypoint.0".into(), h, self.dense_dim() + 4);
        linear("keypoint.1".into(), h, h);
        let d = self.descriptor_dim;
        linear("descriptor.0".into(), d, self.sparse_dim() + self.dense_dim());
        linear("descriptor.1".into(), d, d);
        for name in ["mahalanobis", "euclidean", "normal", "triplet"] {
            out.push((format!("embedding.{name}"), vec![d, d]));
        }
        for l in 0..self.attention_layers {
            for name in ["query", "key", "value", "embedding"] {
                out.push((format!("attention.{l}.{name}"), vec![d, d]));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Weights(format!(
                "shape {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![0.0; n],
        }
    }
}

/// Named tensors of a trained (or synthesized) network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightBundle {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Zero-initialized bundle with every tensor of `arch`.
    pub fn zeros(arch: &Architecture) -> Self {
        let mut b = Self::new();
        for (name, dims) in arch.tensor_shapes() {
            b.insert(name, Tensor::zeros(dims));
        }
        b
    }

    /// Seeded random bundle. Matrices are drawn uniformly with a
    /// Glorot-style bound; biases are small uniform values.
    pub fn synthesize(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Self::new();
        for (name, dims) in arch.tensor_shapes() {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = if dims.len() == 2 {
                let gain = if name.starts_with("attention") || name.starts_with("embedding") {
                    1.0
                } else {
                    2f64.sqrt()
                };
                let bound = gain * (6.0 / (dims[0] + dims[1]) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
            } else {
                (0..n).map(|_| rng.gen_range(-0.05..0.05) as f32).collect()
            };
            b.insert(name, Tensor::new(dims, data)?);
        }
        Ok(b)
    }

    /// Checks that the bundle holds exactly the tensors of `arch` with the
    /// declared shapes and finite values.
    pub fn validate(&self, arch: &Architecture) -> Result<()> {
        arch.validate()?;
        let shapes = arch.tensor_shapes();
        for (name, dims) in &shapes {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Weights(format!("missing tensor '{name}'")))?;
            if &t.dims != dims {
                return Err(Error::Weights(format!(
                    "tensor '{name}' has shape {:?}, expected {dims:?}",
                    t.dims
                )));
            }
            if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Weights(format!("tensor '{name}' has a non-finite value at {i}")));
            }
        }
        if self.tensors.len() != shapes.len() {
            let known: std::collections::BTreeSet<_> = shapes.iter().map(|(n, _)| n.as_str()).collect();
            let extra: Vec<_> = self.names().filter(|n| !known.contains(n)).collect();
            return Err(Error::Weights(format!("unexpected tensors {extra:?}")));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err("bad magic, expected GMLDW1".into());
        }
        let mut at = MAGIC.len();
        let mut take = |n: usize| -> std::result::Result<&[u8], String> {
            if at + n > bytes.len() {
                return Err(format!("truncated record at byte {at}"));
            }
            let s = &bytes[at..at + n];
            at += n;
            Ok(s)
        };
        let mut bundle = Self::new();
        loop {
            let head = match take(2) {
                Ok(h) => h,
                Err(_) => break,
            };
            let name_len = u16::from_le_bytes([head[0], head[1]]) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| "tensor name is not utf-8".to_string())?
                .to_string();
            let rank = take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = dims.iter().product();
            let raw = take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if bundle.tensors.insert(name.clone(), Tensor { dims, data }).is_some() {
                return Err(format!("duplicate tensor '{name}'"));
            }
        }
        if at != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - at));
        }
        Ok(bundle)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| Error::format(path, msg))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

/// Affine map `y = W x + b` with row-major `W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub out_dim: usize,
    pub in_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(out_dim: usize, in_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weight.len(), out_dim * in_dim);
        assert_eq!(bias.len(), out_dim);
        Self {
            out_dim,
            in_dim,
            weight,
            bias,
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        for (r, o) in out.iter_mut().enumerate().take(self.out_dim) {
            let row = &self.weight[r * self.in_dim..(r + 1) * self.in_dim];
            *o = self.bias[r] + dot(row, x);
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim];
        self.apply(x, &mut out);
        out
    }

    /// `W^T y` without the bias.
    pub fn transpose_apply(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, &yr) in y.iter().enumerate().take(self.out_dim) {
            let row = &self.weight[r * self.in_dim..(r + 1) * self.in_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * yr;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention projections of one layer; each maps `d -> d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub embedding: Linear,
}

/// Network assembled from a validated [`WeightBundle`].
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorNet {
    pub arch: Architecture,
    pub encoder: Vec<Linear>,
    /// Indexed by level; entry 0 and the last level are unused.
    pub decoder: Vec<Option<Linear>>,
    pub keypoint: [Linear; 2],
    pub descriptor: [Linear; 2],
    /// Projections of the Mahalanobis, Euclidean, normal-angle and triplet
    /// embeddings, in that order.
    pub embedding: [Linear; 4],
    pub attention: Vec<AttentionLayer>,
}

impl DescriptorNet {
    pub fn from_bundle(bundle: &WeightBundle, arch: &Architecture) -> Result<Self> {
        bundle.validate(arch)?;
        let lin = |name: &str| -> Linear {
            let w = bundle.get(&format!("{name}.weight")).unwrap();
            let b = bundle.get(&format!("{name}.bias")).unwrap();
            Linear::new(
                w.dims[0],
                w.dims[1],
                w.data.iter().map(|&v| v as f64).collect(),
                b.data.iter().map(|&v| v as f64).collect(),
            )
        };
        let square = |name: &str| -> Linear {
            let w = bundle.get(name).unwrap();
            Linear::new(
                w.dims[0],
                w.dims[1],
                w.data.iter().map(|&v| v as f64).collect(),
                vec![0.0; w.dims[0]],
            )
        };
        let stages = arch.stages();
        Ok(Self {
            arch: arch.clone(),
            encoder: (0..stages).map(|s| lin(&format!("encoder.{s}"))).collect(),
            decoder: (0..stages)
                .map(|l| (l >= 1 && l + 1 < stages).then(|| lin(&format!("decoder.{l}"))))
                .collect(),
            keypoint: [lin("keypoint.0"), lin("keypoint.1")],
            descriptor: [lin("descriptor.0"), lin("descriptor.1")],
            embedding: [
                square("embedding.mahalanobis"),
                square("embedding.euclidean"),
                square("embedding.normal"),
                square("embedding.triplet"),
            ],
            attention: (0..arch.attention_layers)
                .map(|l| AttentionLayer {
                    query: square(&format!("attention.{l}.query")),
                    key: square(&format!("attention.{l}.key")),
                    value: square(&format!("attention.{l}.value")),
                    embedding: square(&format!("attention.{l}.embedding")),
                })
                .collect(),
        })
    }

    pub fn synthesize(arch: &Architecture, seed: u64) -> Result<Self> {
        Self::from_bundle(&WeightBundle::synthesize(arch, seed)?, arch)
    }
}
