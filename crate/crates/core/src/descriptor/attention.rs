//! Geometric self-attention over keypoint descriptors.
//!
//! Per layer, with `q = W^Q f`, `k = W^K f`, `v = W^V f`:
//!
//! ```text
//! a_ij  = q_i . (k_j + W^E eps_ij) / sqrt(d)
//! f_i  <- normalize(f_i + sum_j softmax_j(a_i) v_j)
//! ```
//!
//! `eps_ij` is never materialized. Since it is a sum of projected sinusoidal
//! terms, `q_i . W^E eps_ij` is evaluated as `sum_t (P_t^T W^E^T q_i) . e^t_ij`
//! against the raw terms `e^t_ij`, skipping entries no projection reads. The
//! raw terms are kept in single precision,
//! cached for all pairs when they fit in [`EMBEDDING_CACHE_BYTES`] and
//! recomputed per layer otherwise; both paths round identically.

use rayon::prelude::*;

use super::embedding::GeometricEmbedding;
use super::weights::{dot, DescriptorNet};
use super::{l2_normalize, softmax_in_place, FeatureCloud, Features};
use crate::error::{Error, Result};

pub const EMBEDDING_CACHE_BYTES: usize = 192 << 20;

fn project_all(f: &Features, lin: &super::Linear) -> Features {
    let mut out = Features::zeros(f.len(), lin.out_dim);
    let dim = lin.out_dim;
    out_rows_mut(&mut out, dim)
        .par_iter_mut()
        .enumerate()
        .for_each(|(i, row)| lin.apply(f.row(i), row));
    out
}

fn out_rows_mut(f: &mut Features, dim: usize) -> Vec<&mut [f64]> {
    f.data_mut().chunks_exact_mut(dim).collect()
}

/// Raw-term entries that some embedding projection reads; the others never
/// reach a logit.
fn active_terms(emb: &GeometricEmbedding) -> Vec<usize> {
    let d = emb.dim();
    let mut active = Vec::new();
    for (t, p) in emb.projections().iter().enumerate() {
        for c in 0..p.in_dim {
            if (0..p.out_dim).any(|r| p.weight[r * p.in_dim + c] != 0.0) {
                active.push(t * d + c);
            }
        }
    }
    active
}

fn fill_raw(emb: &GeometricEmbedding, i: usize, j: usize, active: &[usize], scratch: &mut [f64], out: &mut [f32]) {
    if active.len() == scratch.len() {
        emb.raw_terms_into(i, j, scratch);
        for (o, v) in out.iter_mut().zip(scratch.iter()) {
            *o = *v as f32;
        }
    } else {
        for (o, &idx) in out.iter_mut().zip(active) {
            *o = emb.raw_term(i, j, idx) as f32;
        }
    }
}

pub fn plane_attention(
    fc: &FeatureCloud,
    emb: &GeometricEmbedding,
    net: &DescriptorNet,
    layers: usize,
) -> Result<Features> {
    plane_attention_with_budget(fc, emb, net, layers, EMBEDDING_CACHE_BYTES)
}

/// [`plane_attention`] with an explicit cache budget in bytes.
pub fn plane_attention_with_budget(
    fc: &FeatureCloud,
    emb: &GeometricEmbedding,
    net: &DescriptorNet,
    layers: usize,
    cache_bytes: usize,
) -> Result<Features> {
    let n = fc.len();
    let d = net.arch.descriptor_dim;
    if layers > net.attention.len() {
        return Err(Error::param(format!(
            "{layers} attention layers requested, weights provide {}",
            net.attention.len()
        )));
    }
    if fc.descriptor_dim() != d || emb.dim() != d {
        return Err(Error::param("descriptor, embedding and network widths differ"));
    }
    if emb.len() != n {
        return Err(Error::param("embedding was built for a different feature cloud"));
    }
    let mut f = fc.descriptors.clone();
    if n == 0 || layers == 0 {
        return Ok(f);
    }

    let active = active_terms(emb);
    let stride = active.len();
    let cache: Option<Vec<f32>> = (stride > 0 && n * n * stride * 4 <= cache_bytes).then(|| {
        let mut c = vec![0f32; n * n * stride];
        c.par_chunks_mut(n * stride).enumerate().for_each(|(i, row)| {
            let mut scratch = vec![0.0; 4 * d];
            for (j, out) in row.chunks_exact_mut(stride).enumerate() {
                fill_raw(emb, i, j, &active, &mut scratch, out);
            }
        });
        c
    });
    let scale = 1.0 / (d as f64).sqrt();
    let proj = emb.projections();

    for layer in &net.attention[..layers] {
        let q = project_all(&f, &layer.query);
        let k = project_all(&f, &layer.key);
        let v = project_all(&f, &layer.value);
        let mut next = Features::zeros(n, d);
        let prev = &f;
        out_rows_mut(&mut next, d)
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, out)| {
                let mut w = vec![0.0; d];
                layer.embedding.transpose_apply(q.row(i), &mut w);
                let mut full = vec![0.0; 4 * d];
                for (t, p) in proj.iter().enumerate() {
                    p.transpose_apply(&w, &mut full[t * d..(t + 1) * d]);
                }
                let u: Vec<f64> = active.iter().map(|&idx| full[idx]).collect();
                let mut scratch = vec![0.0; 4 * d];
                let mut raw = vec![0f32; stride];
                let mut logits: Vec<f64> = (0..n)
                    .map(|j| {
                        let e: &[f32] = match &cache {
                            Some(c) => &c[(i * n + j) * stride..(i * n + j + 1) * stride],
                            None => {
                                fill_raw(emb, i, j, &active, &mut scratch, &mut raw);
                                &raw
                            }
                        };
                        let geo: f64 = u.iter().zip(e).map(|(a, &b)| a * b as f64).sum();
                        (dot(q.row(i), k.row(j)) + geo) * scale
                    })
                    .collect();
                softmax_in_place(&mut logits);
                out.copy_from_slice(prev.row(i));
                for (j, a) in logits.iter().enumerate() {
                    for (o, x) in out.iter_mut().zip(v.row(j)) {
                        *o += a * x;
                    }
                }
                l2_normalize(out);
            });
        f = next;
    }
    Ok(f)
}
