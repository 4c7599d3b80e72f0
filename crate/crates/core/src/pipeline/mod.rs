//! End-to-end stages: extraction, loop detection, registration,
//! verification and factor-graph merging.

mod eval;
mod files;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;

pub use eval::{evaluate, EvalInput};
pub use files::{
    format_candidates, format_closures, list_nodes, node_path, node_stem, parse_candidates, parse_closures,
    parse_node, parse_stem, read_candidates, read_closures, read_text, write_text, LoopCandidate, CLOUD_EXT,
    FEATURE_EXT,
};

use crate::config::PipelineConfig;
use crate::descriptor::{extract_features, DescriptorNet, FeatureCloud};
use crate::error::{Error, Result};
use crate::geometry::{transform_cloud, voxel_downsample, PointCloud};
use crate::graph::{
    loop_factor, optimize, optimize_from, place_scan_match_factors, GraphFile, InterSessionEdge, KeyframeCloud,
    MergedMap, NodeId, OverlapPair, RelativePoseFactor, ScanMatchFactor, SessionGraph,
};
use crate::matching::{candidate_distances, gicp_refine, select_correspondences, svd_align};
use crate::verification::{verify_closures, ClosureStatus, LoopClosure};

/// Neighbors used for the per-point GICP covariances of keyframe clouds.
pub const COVARIANCE_K: usize = 20;

pub fn extract_all(
    clouds: &BTreeMap<NodeId, PointCloud>,
    net: &DescriptorNet,
    cfg: &PipelineConfig,
) -> Result<BTreeMap<NodeId, FeatureCloud>> {
    let params = cfg.extract_params();
    let items: Vec<(&NodeId, &PointCloud)> = clouds.iter().collect();
    items
        .par_iter()
        .map(|(id, c)| extract_features(c, net, &params).map(|f| (**id, f)))
        .collect()
}

/// Every keyframe queries each other session; the argmin candidate below
/// the threshold becomes a loop candidate. Pairs are oriented so that
/// `from.session < to.session` and deduplicated.
pub fn detect_loops(features: &BTreeMap<NodeId, FeatureCloud>, cfg: &PipelineConfig) -> Result<Vec<LoopCandidate>> {
    let mut sessions: BTreeMap<u32, Vec<NodeId>> = BTreeMap::new();
    for id in features.keys() {
        sessions.entry(id.session).or_default().push(*id);
    }
    let mut queries = Vec::new();
    for (&qs, members) in &sessions {
        for &cs in sessions.keys().filter(|&&s| s != qs) {
            for &q in members {
                queries.push((q, cs));
            }
        }
    }
    let found: Vec<Option<LoopCandidate>> = queries
        .par_iter()
        .map(|&(q, cs)| {
            let cands = &sessions[&cs];
            let descs: Vec<_> = cands.iter().map(|c| &features[c].descriptors).collect();
            let query = &features[&q].descriptors;
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in descs.iter().enumerate() {
                let s = cfg.correspondences.min(query.len() * g.len());
                if s == 0 {
                    continue;
                }
                let d = candidate_distances(query, &[*g], s)?[0];
                if best.map_or(true, |(_, b)| d < b) {
                    best = Some((i, d));
                }
            }
            Ok(best.filter(|&(_, d)| d < cfg.loop_threshold).map(|(i, d)| {
                let c = cands[i];
                let (from, to) = if q.session < c.session { (q, c) } else { (c, q) };
                LoopCandidate { from, to, distance: d }
            }))
        })
        .collect::<Result<_>>()?;
    let mut unique: BTreeMap<(NodeId, NodeId), LoopCandidate> = BTreeMap::new();
    for c in found.into_iter().flatten() {
        unique
            .entry((c.from, c.to))
            .and_modify(|e| {
                if c.distance < e.distance {
                    *e = c;
                }
            })
            .or_insert(c);
    }
    Ok(unique.into_values().collect())
}

/// Keyframe clouds carrying GICP covariances.
pub fn keyframe_clouds(clouds: &BTreeMap<NodeId, PointCloud>) -> Result<BTreeMap<NodeId, Arc<KeyframeCloud>>> {
    let items: Vec<(&NodeId, &PointCloud)> = clouds.iter().collect();
    items
        .par_iter()
        .map(|(id, c)| KeyframeCloud::with_covariances(c, COVARIANCE_K).map(|k| (**id, Arc::new(k))))
        .collect()
}

/// Outcome of registering one candidate.
#[derive(Clone, Debug, PartialEq)]
pub enum Registration {
    Closure(LoopClosure),
    Failed { from: NodeId, to: NodeId, reason: String },
}

/// SVD on the descriptor correspondences, then GICP from that estimate.
/// The resulting pose maps `to`'s frame into `from`'s.
pub fn register_candidates(
    candidates: &[LoopCandidate],
    features: &BTreeMap<NodeId, FeatureCloud>,
    clouds: &BTreeMap<NodeId, Arc<KeyframeCloud>>,
    cfg: &PipelineConfig,
) -> Result<Vec<Registration>> {
    let gicp = cfg.gicp_params();
    candidates
        .par_iter()
        .map(|c| {
            let get_f = |id: NodeId| features.get(&id).ok_or_else(|| Error::Data(format!("no features for keyframe {id}")));
            let get_c = |id: NodeId| clouds.get(&id).ok_or_else(|| Error::Data(format!("no cloud for keyframe {id}")));
            let (fs, ft) = (get_f(c.to)?, get_f(c.from)?);
            let (cs, ct) = (get_c(c.to)?, get_c(c.from)?);
            let s = cfg.correspondences.min(fs.len() * ft.len());
            let attempt = select_correspondences(fs, ft, s)
                .and_then(|corr| svd_align(&corr))
                .and_then(|init| gicp_refine(cs.cloud(), ct.cloud(), &init, &gicp));
            Ok(match attempt {
                Ok(r) => Registration::Closure(LoopClosure {
                    from: c.from,
                    to: c.to,
                    relative_pose: r.pose,
                    inlier_ratio: r.inlier_ratio,
                    alignment_error: r.alignment_error,
                    descriptor_distance: c.distance,
                    status: ClosureStatus::Candidate,
                }),
                Err(e @ (Error::DegenerateCorrespondences(_) | Error::RegistrationFailed(_))) => Registration::Failed {
                    from: c.from,
                    to: c.to,
                    reason: e.to_string(),
                },
                Err(e) => return Err(e),
            })
        })
        .collect()
}

fn intra_poses(graphs: &[SessionGraph]) -> BTreeMap<NodeId, crate::geometry::Pose> {
    graphs
        .iter()
        .flat_map(|g| g.keyframes.iter().map(move |k| (NodeId::new(g.session_id, k.id), k.pose)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct MergeOptions {
    pub scan_factors: bool,
}

impl Default for MergeOptions {
    fn default() -> Self {
        Self { scan_factors: true }
    }
}

#[derive(Clone, Debug)]
pub struct MergeResult {
    pub candidates: Vec<LoopCandidate>,
    pub registrations: Vec<Registration>,
    /// Registered closures with their final status.
    pub closures: Vec<LoopClosure>,
    pub loop_factors: Vec<RelativePoseFactor>,
    /// Optimized with loop factors only.
    pub preliminary: MergedMap,
    pub overlaps: Vec<OverlapPair>,
    pub merged: MergedMap,
}

/// Full merge from extracted features and keyframe clouds.
pub fn merge(
    graphs: &[SessionGraph],
    clouds: &BTreeMap<NodeId, Arc<KeyframeCloud>>,
    features: &BTreeMap<NodeId, FeatureCloud>,
    cfg: &PipelineConfig,
    opts: &MergeOptions,
) -> Result<MergeResult> {
    cfg.validate()?;
    if graphs.len() < 2 {
        return Err(Error::param(format!("merging needs at least 2 sessions, got {}", graphs.len())));
    }
    let poses = intra_poses(graphs);
    for id in poses.keys() {
        if !clouds.contains_key(id) {
            return Err(Error::Data(format!("no cloud for keyframe {id}")));
        }
        if !features.contains_key(id) {
            return Err(Error::Data(format!("no features for keyframe {id}")));
        }
    }
    let candidates = detect_loops(features, cfg)?;
    let registrations = register_candidates(&candidates, features, clouds, cfg)?;
    let closures: Vec<LoopClosure> = registrations
        .iter()
        .filter_map(|r| match r {
            Registration::Closure(c) => Some(c.clone()),
            Registration::Failed { .. } => None,
        })
        .collect();
    merge_registered(graphs, clouds, candidates, registrations, closures, cfg, opts)
}

/// Gating, consistency check and factor-graph merge of registered closures.
pub fn merge_registered(
    graphs: &[SessionGraph],
    clouds: &BTreeMap<NodeId, Arc<KeyframeCloud>>,
    candidates: Vec<LoopCandidate>,
    registrations: Vec<Registration>,
    mut closures: Vec<LoopClosure>,
    cfg: &PipelineConfig,
    opts: &MergeOptions,
) -> Result<MergeResult> {
    verify_closures(&mut closures, &intra_poses(graphs), &cfg.verification_params())?;
    merge_verified(graphs, clouds, candidates, registrations, closures, cfg, opts)
}

/// Factor-graph half of [`merge`], from closures whose status is already
/// decided.
pub fn merge_verified(
    graphs: &[SessionGraph],
    clouds: &BTreeMap<NodeId, Arc<KeyframeCloud>>,
    candidates: Vec<LoopCandidate>,
    registrations: Vec<Registration>,
    closures: Vec<LoopClosure>,
    cfg: &PipelineConfig,
    opts: &MergeOptions,
) -> Result<MergeResult> {
    let loop_factors: Vec<RelativePoseFactor> = closures
        .iter()
        .filter(|c| c.status == ClosureStatus::Verified)
        .map(|c| loop_factor(c, cfg.voxel_leaf))
        .collect();
    let params = cfg.optimizer_params();
    let preliminary = optimize(graphs, &loop_factors, &[], &params)?;
    let (overlaps, merged) = if opts.scan_factors {
        let overlaps = place_scan_match_factors(clouds, &preliminary.poses, cfg.overlap_min, cfg.n_k, cfg.overlap_radius)?;
        let factors = overlaps
            .iter()
            .map(|o| {
                ScanMatchFactor::new(o.a, o.b, clouds[&o.a].clone(), clouds[&o.b].clone(), cfg.scan_scale, cfg.scan_gate)
                    .map(|f| f.with_mutual(cfg.scan_mutual))
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = optimize_from(graphs, &loop_factors, &factors, &preliminary.poses, &params)?;
        (overlaps, merged)
    } else {
        (Vec::new(), preliminary.clone())
    };
    Ok(MergeResult {
        candidates,
        registrations,
        closures,
        loop_factors,
        preliminary,
        overlaps,
        merged,
    })
}

/// Session graphs with `poses` in place of their keyframe poses and the
/// loop factors as inter-session edges.
pub fn merged_graph(graphs: &[SessionGraph], poses: &BTreeMap<NodeId, crate::geometry::Pose>, loops: &[RelativePoseFactor]) -> GraphFile {
    let mut sessions = graphs.to_vec();
    for g in &mut sessions {
        for k in &mut g.keyframes {
            if let Some(p) = poses.get(&NodeId::new(g.session_id, k.id)) {
                k.pose = *p;
            }
        }
    }
    let mut inter_edges: Vec<InterSessionEdge> = loops
        .iter()
        .map(|f| InterSessionEdge {
            from: f.from,
            to: f.to,
            measurement: f.measurement,
            information: f.information,
        })
        .collect();
    inter_edges.sort_by_key(|e| (e.from.session, e.to.session, e.from.keyframe, e.to.keyframe));
    GraphFile { sessions, inter_edges }
}

/// Every keyframe cloud in the merged frame, voxelized at `leaf`.
pub fn merged_cloud(
    clouds: &BTreeMap<NodeId, Arc<KeyframeCloud>>,
    poses: &BTreeMap<NodeId, crate::geometry::Pose>,
    leaf: f64,
) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (id, pose) in poses {
        if let Some(c) = clouds.get(id) {
            pts.extend(transform_cloud(c.cloud(), pose).into_points());
        }
    }
    voxel_downsample(&PointCloud::new(pts)?, leaf)
}

fn between_cost(g: &SessionGraph, poses: &BTreeMap<NodeId, crate::geometry::Pose>) -> f64 {
    g.between_factors
        .iter()
        .filter_map(|b| {
            let from = poses.get(&NodeId::new(g.session_id, b.from))?;
            let to = poses.get(&NodeId::new(g.session_id, b.to))?;
            let f = RelativePoseFactor {
                from: NodeId::new(g.session_id, b.from),
                to: NodeId::new(g.session_id, b.to),
                measurement: b.measurement,
                information: b.information,
            };
            Some(f.cost(from, to))
        })
        .sum()
}

impl MergeResult {
    pub fn count(&self, status: ClosureStatus) -> usize {
        self.closures.iter().filter(|c| c.status >= status).count()
    }

    pub fn report_text(&self, graphs: &[SessionGraph]) -> String {
        let mut out = String::new();
        let failed = self.registrations.iter().filter(|r| matches!(r, Registration::Failed { .. })).count();
        let keyframes: usize = graphs.iter().map(|g| g.keyframes.len()).sum();
        let _ = writeln!(out, "sessions={}", graphs.len());
        let _ = writeln!(out, "keyframes={keyframes}");
        let _ = writeln!(out, "candidates={}", self.candidates.len());
        let _ = writeln!(out, "registration_failures={failed}");
        let _ = writeln!(out, "closures_registered={}", self.closures.len());
        let _ = writeln!(out, "closures_gated={}", self.count(ClosureStatus::Gated));
        let _ = writeln!(out, "closures_verified={}", self.count(ClosureStatus::Verified));
        let _ = writeln!(out, "scan_factors={}", self.overlaps.len());
        let _ = writeln!(out, "preliminary_iterations={}", self.preliminary.iterations);
        let _ = writeln!(out, "preliminary_cost={:?}", self.preliminary.final_cost);
        let _ = writeln!(out, "final_iterations={}", self.merged.iterations);
        let _ = writeln!(out, "initial_cost={:?}", self.merged.initial_cost);
        let _ = writeln!(out, "final_cost={:?}", self.merged.final_cost);
        let _ = writeln!(out, "empty_scan_linearizations={}", self.merged.empty_scan_linearizations);
        for g in graphs {
            let _ = writeln!(out, "session_{}_residual={:?}", g.session_id, between_cost(g, &self.merged.poses));
        }
        out
    }
}
