//! Flat `key = value` pipeline configuration.
//!
//! `#` starts a comment, blank lines are ignored, keys may appear at most
//! once and unknown keys are rejected. [`PipelineConfig::to_text`] writes
//! every key in a fixed order, so parsing and re-serializing any accepted
//! file yields the same canonical text.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::descriptor::{Architecture, EmbeddingBetas, ExtractParams, KeypointParams};
use crate::error::{Error, Result};
use crate::graph::OptimizerParams;
use crate::matching::GicpParams;
use crate::verification::VerificationParams;

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub voxel_leaf: f64,
    /// Descriptor pairs used for the inter-scan distance and for SVD.
    pub correspondences: usize,
    pub keypoint_k: usize,
    pub dilation: bool,
    pub attention_layers: usize,
    pub descriptor_dim: usize,
    /// Length scale of the Mahalanobis embedding, `1 / beta_d`.
    pub distance_scale: f64,
    pub euclidean_scale: f64,
    pub normal_scale_deg: f64,
    pub angle_scale_deg: f64,
    pub loop_threshold: f64,
    pub gate_max_error: f64,
    pub gate_min_inlier: f64,
    pub pcm_tol_t: f64,
    pub pcm_tol_r_deg: f64,
    pub pcm_exact_limit: usize,
    pub overlap_min: f64,
    pub overlap_radius: f64,
    pub n_k: usize,
    pub scan_scale: f64,
    pub scan_gate: f64,
    /// Scan factors keep only mutual nearest-neighbor pairs.
    pub scan_mutual: bool,
    pub gicp_max_iter: usize,
    pub gicp_trans_eps: f64,
    pub optimizer_max_outer: usize,
    pub optimizer_tol: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            voxel_leaf: 0.3,
            correspondences: 256,
            keypoint_k: 64,
            dilation: false,
            attention_layers: 3,
            descriptor_dim: 256,
            distance_scale: 4.8,
            euclidean_scale: 4.8,
            normal_scale_deg: 15.0,
            angle_scale_deg: 15.0,
            loop_threshold: 0.16,
            gate_max_error: 0.3,
            gate_min_inlier: 0.6,
            pcm_tol_t: 0.5,
            pcm_tol_r_deg: 2.5,
            pcm_exact_limit: 20,
            overlap_min: 0.2,
            overlap_radius: 0.3,
            n_k: 3,
            scan_scale: 0.01,
            scan_gate: 1.0,
            scan_mutual: true,
            gicp_max_iter: 64,
            gicp_trans_eps: 1e-6,
            optimizer_max_outer: 50,
            optimizer_tol: 1e-8,
            seed: 0,
        }
    }
}

enum Value<'a> {
    Float(&'a mut f64),
    Count(&'a mut usize),
    Seed(&'a mut u64),
    Flag(&'a mut bool),
}

fn parse<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{raw}'")))
}

impl PipelineConfig {
    fn fields(&mut self) -> Vec<(&'static str, Value<'_>)> {
        use Value::*;
        vec![
            ("voxel_leaf", Float(&mut self.voxel_leaf)),
            ("correspondences", Count(&mut self.correspondences)),
            ("keypoint_k", Count(&mut self.keypoint_k)),
            ("dilation", Flag(&mut self.dilation)),
            ("attention_layers", Count(&mut self.attention_layers)),
            ("descriptor_dim", Count(&mut self.descriptor_dim)),
            ("distance_scale", Float(&mut self.distance_scale)),
            ("euclidean_scale", Float(&mut self.euclidean_scale)),
            ("normal_scale_deg", Float(&mut self.normal_scale_deg)),
            ("angle_scale_deg", Float(&mut self.angle_scale_deg)),
            ("loop_threshold", Float(&mut self.loop_threshold)),
            ("gate_max_error", Float(&mut self.gate_max_error)),
            ("gate_min_inlier", Float(&mut self.gate_min_inlier)),
            ("pcm_tol_t", Float(&mut self.pcm_tol_t)),
            ("pcm_tol_r_deg", Float(&mut self.pcm_tol_r_deg)),
            ("pcm_exact_limit", Count(&mut self.pcm_exact_limit)),
            ("overlap_min", Float(&mut self.overlap_min)),
            ("overlap_radius", Float(&mut self.overlap_radius)),
            ("n_k", Count(&mut self.n_k)),
            ("scan_scale", Float(&mut self.scan_scale)),
            ("scan_gate", Float(&mut self.scan_gate)),
            ("scan_mutual", Flag(&mut self.scan_mutual)),
            ("gicp_max_iter", Count(&mut self.gicp_max_iter)),
            ("gicp_trans_eps", Float(&mut self.gicp_trans_eps)),
            ("optimizer_max_outer", Count(&mut self.optimizer_max_outer)),
            ("optimizer_tol", Float(&mut self.optimizer_tol)),
            ("seed", Seed(&mut self.seed)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        Self::default().fields().into_iter().map(|(k, _)| k).collect()
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut fields = self.fields();
        let (_, slot) = fields
            .iter_mut()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        match slot {
            Value::Float(v) => {
                let x: f64 = parse(key, raw)?;
                if !x.is_finite() {
                    return Err(Error::Config(format!("{key}: value must be finite")));
                }
                **v = x;
            }
            Value::Count(v) => **v = parse(key, raw)?,
            Value::Seed(v) => **v = parse(key, raw)?,
            Value::Flag(v) => **v = parse(key, raw)?,
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        let mut copy = self.clone();
        let mut out = String::new();
        for (key, value) in copy.fields() {
            let _ = match value {
                Value::Float(v) => writeln!(out, "{key} = {v:?}"),
                Value::Count(v) => writeln!(out, "{key} = {v}"),
                Value::Seed(v) => writeln!(out, "{key} = {v}"),
                Value::Flag(v) => writeln!(out, "{key} = {v}"),
            };
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("voxel_leaf", self.voxel_leaf),
            ("distance_scale", self.distance_scale),
            ("euclidean_scale", self.euclidean_scale),
            ("normal_scale_deg", self.normal_scale_deg),
            ("angle_scale_deg", self.angle_scale_deg),
            ("loop_threshold", self.loop_threshold),
            ("gate_max_error", self.gate_max_error),
            ("pcm_tol_t", self.pcm_tol_t),
            ("pcm_tol_r_deg", self.pcm_tol_r_deg),
            ("overlap_radius", self.overlap_radius),
            ("scan_scale", self.scan_scale),
            ("scan_gate", self.scan_gate),
            ("gicp_trans_eps", self.gicp_trans_eps),
            ("optimizer_tol", self.optimizer_tol),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        for (key, v) in [("gate_min_inlier", self.gate_min_inlier), ("overlap_min", self.overlap_min)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{key} must lie in [0, 1], got {v}")));
            }
        }
        let counts = [
            ("correspondences", self.correspondences),
            ("keypoint_k", self.keypoint_k),
            ("attention_layers", self.attention_layers),
            ("n_k", self.n_k),
            ("gicp_max_iter", self.gicp_max_iter),
            ("optimizer_max_outer", self.optimizer_max_outer),
        ];
        for (key, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be at least 1")));
            }
        }
        if self.descriptor_dim == 0 || self.descriptor_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "descriptor_dim must be even and positive, got {}",
                self.descriptor_dim
            )));
        }
        if self.pcm_tol_r_deg > 180.0 {
            return Err(Error::Config("pcm_tol_r_deg must not exceed 180".into()));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            descriptor_dim: self.descriptor_dim,
            attention_layers: self.attention_layers,
            ..Architecture::default()
        }
    }

    pub fn betas(&self) -> EmbeddingBetas {
        EmbeddingBetas {
            distance: 1.0 / self.distance_scale,
            euclidean: 1.0 / self.euclidean_scale,
            normal: 1.0 / self.normal_scale_deg.to_radians(),
            angle: 1.0 / self.angle_scale_deg.to_radians(),
        }
    }

    pub fn extract_params(&self) -> ExtractParams {
        ExtractParams {
            voxel_leaf: self.voxel_leaf,
            keypoint: KeypointParams {
                k: self.keypoint_k,
                dilation: self.dilation,
                seed: self.seed,
                ..KeypointParams::default()
            },
            betas: self.betas(),
            attention_layers: self.attention_layers,
        }
    }

    pub fn verification_params(&self) -> VerificationParams {
        VerificationParams {
            max_error: self.gate_max_error,
            min_inlier: self.gate_min_inlier,
            tol_t: self.pcm_tol_t,
            tol_r: self.pcm_tol_r_deg.to_radians(),
            exact_limit: self.pcm_exact_limit,
        }
    }

    pub fn gicp_params(&self) -> GicpParams {
        GicpParams {
            max_iter: self.gicp_max_iter,
            trans_eps: self.gicp_trans_eps,
            inlier_radius: 1.5 * self.voxel_leaf,
            min_gate: 1.5 * self.voxel_leaf,
            ..GicpParams::default()
        }
    }

    pub fn optimizer_params(&self) -> OptimizerParams {
        OptimizerParams {
            max_outer: self.optimizer_max_outer,
            tol: self.optimizer_tol,
            ..OptimizerParams::default()
        }
    }
}
