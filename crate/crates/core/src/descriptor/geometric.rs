//! Hand-set weights for running without a trained model.
//!
//! The encoder passes a constant channel through and stacks the
//! neighborhood statistics of every stage, so sparse points carry shape
//! statistics at three radii. The keypoint head is flat (keypoints are group
//! centroids). The descriptor head standardizes the statistics, keeping them
//! linear through the leaky ReLU by splitting each into a `+z` and `-z`
//! channel, and appends a constant channel. Each attention layer then pools
//! the local statistics of nearby keypoints with a Gaussian-like kernel over
//! Euclidean distance, read from one cosine entry of the distance embedding,
//! and writes the pooled values into a fresh block of channels.

use super::encoder::GEO_STATS;
use super::weights::{Architecture, WeightBundle};
use super::EmbeddingBetas;
use crate::error::{Error, Result};

const STATS: usize = 6 * GEO_STATS;

/// Typical value and spread of each descriptor statistic: the sparse
/// feature's three stages, then the aggregated dense feature's three stages.
const STAT_CENTER: [f64; STATS] = [
    0.7192, 0.6459, 0.0135, 0.1704, 0.2748,
    1.0474, 0.6625, 0.0207, 0.1811, 0.2560,
    1.0969, 0.6592, 0.0223, 0.1559, 0.2391,
    0.7209, 0.6474, 0.0138, 0.1723, 0.2751,
    1.0534, 0.6653, 0.0217, 0.1845, 0.2566,
    1.1205, 0.6593, 0.0242, 0.1695, 0.2435,
];
const STAT_SCALE: [f64; STATS] = [
    0.0424, 0.0166, 0.0158, 0.0176, 0.0088,
    0.0666, 0.0206, 0.0237, 0.0310, 0.0157,
    0.0983, 0.0388, 0.0262, 0.0660, 0.0444,
    0.0449, 0.0157, 0.0171, 0.0139, 0.0093,
    0.0705, 0.0176, 0.0262, 0.0287, 0.0164,
    0.0651, 0.0188, 0.0234, 0.0403, 0.0259,
];

/// Kernel widths of the attention layers in meters.
const POOL_SIGMA: [f64; 3] = [1.0, 2.0, 4.0];
const CONSTANT: f64 = 1.0;

struct Builder {
    bundle: WeightBundle,
}

impl Builder {
    fn set(&mut self, name: &str, idx: &[usize], v: f64) -> Result<()> {
        let t = self
            .bundle
            .get_mut(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor '{name}'")))?;
        let flat = match idx {
            [i] => *i,
            [r, c] => r * t.dims[1] + c,
            _ => unreachable!(),
        };
        t.data[flat] = v as f32;
        Ok(())
    }
}

/// Index of the cosine entry whose frequency keeps `cos(beta x f)` monotone
/// over the first ~30 m.
fn kernel_entry(dim: usize, beta: f64) -> (usize, f64) {
    let inv = |k: usize| 10000f64.powf(-((2 * k) as f64) / dim as f64);
    let k = (0..dim / 2).find(|&k| inv(k) * beta * 30.0 < std::f64::consts::PI).unwrap_or(dim / 2 - 1);
    (2 * k + 1, inv(k) * beta)
}

impl WeightBundle {
    /// Deterministic weights computing multi-scale shape statistics and
    /// distance-weighted context. `betas` must match the extraction settings.
    pub fn geometric(arch: &Architecture, betas: &EmbeddingBetas) -> Result<Self> {
        arch.validate()?;
        let g = GEO_STATS;
        let dims = &arch.encoder_dims;
        let d = arch.descriptor_dim;
        let layers = arch.attention_layers;
        if dims.len() != 3 || dims[0] < 1 + g || dims[1] < 1 + 3 * g || dims[2] < 1 + 3 * g {
            return Err(Error::param("geometric weights need three encoder stages of widths 6, 16, 16 or more"));
        }
        if d < 2 * STATS + 1 || d < STATS * (1 + layers) + 1 {
            return Err(Error::param("descriptor dimension too small for geometric weights"));
        }
        let mut b = Builder {
            bundle: WeightBundle::zeros(arch),
        };

        // encoder stage s: [mean fine features, stats] -> [const, carried stats, own stats]
        for s in 0..3 {
            let name = format!("encoder.{s}.weight");
            let fine = if s == 0 { 1 } else { dims[s - 1] };
            let carried = 1 + s * g;
            for c in 0..carried {
                b.set(&name, &[c, c], 1.0)?;
            }
            for k in 0..g {
                b.set(&name, &[carried + k, fine + k], 1.0)?;
            }
        }
        // decoder: own stage-1 channels, then the coarse neighbor's stage-2 stats
        let top = dims[2];
        for c in 0..1 + 2 * g {
            b.set("decoder.1.weight", &[c, top + c], 1.0)?;
        }
        for k in 0..g {
            b.set("decoder.1.weight", &[1 + 2 * g + k, 1 + 2 * g + k], 1.0)?;
        }

        // descriptor head
        let sparse = arch.sparse_dim();
        for (c, (&mu, &sd)) in STAT_CENTER.iter().zip(&STAT_SCALE).enumerate() {
            let input = if c < 3 * g { 1 + c } else { sparse + 1 + (c - 3 * g) };
            let w = 1.0 / (sd * (STATS as f64).sqrt());
            b.set("descriptor.0.weight", &[2 * c, input], w)?;
            b.set("descriptor.0.bias", &[2 * c], -mu * w)?;
            b.set("descriptor.0.weight", &[2 * c + 1, input], -w)?;
            b.set("descriptor.0.bias", &[2 * c + 1], mu * w)?;
            b.set("descriptor.1.weight", &[c, 2 * c], 1.0 / 1.1)?;
            b.set("descriptor.1.weight", &[c, 2 * c + 1], -1.0 / 1.1)?;
        }
        b.set("descriptor.0.bias", &[2 * STATS], 1.0)?;
        b.set("descriptor.1.weight", &[d - 1, 2 * STATS], CONSTANT)?;

        // attention: logit = a cos(f x) / sqrt(d) ~ const - x^2 / (2 sigma^2)
        let (entry, freq) = kernel_entry(d, betas.euclidean);
        b.set("embedding.euclidean", &[0, entry], 1.0)?;
        let mut constant = CONSTANT / (1.0 + CONSTANT * CONSTANT).sqrt();
        for l in 0..layers {
            let sigma = POOL_SIGMA[l.min(POOL_SIGMA.len() - 1)];
            let a = (d as f64).sqrt() / (constant * sigma * sigma * freq * freq);
            b.set(&format!("attention.{l}.query"), &[0, d - 1], a)?;
            for c in 0..d {
                b.set(&format!("attention.{l}.embedding"), &[c, c], 1.0)?;
            }
            for c in 0..STATS {
                b.set(&format!("attention.{l}.value"), &[STATS * (l + 1) + c, c], 1.0)?;
            }
            // the pooled block roughly matches the local block in norm
            constant /= 2f64.sqrt();
        }
        Ok(b.bundle)
    }
}
