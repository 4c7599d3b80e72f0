use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use mapfuse_core::config::PipelineConfig;
use mapfuse_core::descriptor::{extract_features, DescriptorNet, FeatureCloud, WeightBundle};
use mapfuse_core::graph::{GraphFile, Keyframe, NodeId, SessionGraph};
use mapfuse_core::io::{read_features, read_graph, read_ply, write_features, write_graph, write_ply};
use mapfuse_core::metrics::pr_samples_text;
use mapfuse_core::pipeline::{
    self, format_candidates, format_closures, keyframe_clouds, list_nodes, node_path, node_stem, read_candidates,
    read_closures, write_text, EvalInput, MergeOptions, Registration, CLOUD_EXT, FEATURE_EXT,
};
use mapfuse_core::synth::{generate, Scenario, SynthParams};
use mapfuse_core::{Error, PointCloud, Result};

use crate::Global;

pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("MAPFUSE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::param(format!("MAPFUSE_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::param(format!("thread pool: {e}")))
}

fn config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(g: &Global) -> Result<&Path> {
    let dir = g.out.as_deref().ok_or_else(|| Error::param("--out is required"))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

fn network(g: &Global, cfg: &PipelineConfig) -> Result<DescriptorNet> {
    let arch = cfg.architecture();
    let bundle = match &g.weights {
        Some(p) => WeightBundle::read(p)?,
        None => WeightBundle::geometric(&arch, &cfg.betas())?,
    };
    DescriptorNet::from_bundle(&bundle, &arch)
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            out.extend(list_nodes(p, CLOUD_EXT)?.into_iter().map(|(id, path)| (node_stem(id), path)));
        } else {
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::param(format!("bad input file name {}", p.display())))?;
            out.push((stem.to_string(), p.clone()));
        }
    }
    let mut seen = BTreeSet::new();
    for (stem, _) in &out {
        if !seen.insert(stem) {
            return Err(Error::param(format!("two inputs share the name '{stem}'")));
        }
    }
    Ok(out)
}

pub fn extract(g: &Global, inputs: &[PathBuf]) -> Result<()> {
    let cfg = config(g)?;
    let jobs = expand_inputs(inputs)?;
    let dir = out_dir(g)?;
    if jobs.is_empty() {
        eprintln!("warning: no input clouds, nothing extracted");
        return Ok(());
    }
    let net = network(g, &cfg)?;
    let params = cfg.extract_params();
    jobs.par_iter().try_for_each(|(stem, path)| {
        let f = extract_features(&read_ply(path)?, &net, &params)?;
        write_features(&dir.join(format!("{stem}.{FEATURE_EXT}")), &f)
    })
}

fn load_features(dir: &Path, ids: Option<&BTreeSet<NodeId>>) -> Result<BTreeMap<NodeId, FeatureCloud>> {
    let paths: Vec<(NodeId, PathBuf)> = match ids {
        Some(ids) => ids.iter().map(|&id| (id, node_path(dir, id, FEATURE_EXT))).collect(),
        None => list_nodes(dir, FEATURE_EXT)?.into_iter().collect(),
    };
    paths.par_iter().map(|(id, p)| Ok((*id, read_features(p)?))).collect()
}

fn load_clouds(dir: &Path, ids: &BTreeSet<NodeId>) -> Result<BTreeMap<NodeId, PointCloud>> {
    let ids: Vec<NodeId> = ids.iter().copied().collect();
    ids.par_iter()
        .map(|&id| Ok((id, read_ply(&node_path(dir, id, CLOUD_EXT))?)))
        .collect()
}

pub fn detect_loops(g: &Global, features: &Path) -> Result<()> {
    let cfg = config(g)?;
    let feats = load_features(features, None)?;
    let candidates = pipeline::detect_loops(&feats, &cfg)?;
    write_text(&out_dir(g)?.join("candidates.txt"), &format_candidates(&candidates))
}

pub fn register(g: &Global, candidates: &Path, features: &Path, clouds: &Path) -> Result<()> {
    let cfg = config(g)?;
    let cands = read_candidates(candidates)?;
    let ids: BTreeSet<NodeId> = cands.iter().flat_map(|c| [c.from, c.to]).collect();
    let feats = load_features(features, Some(&ids))?;
    let kc = keyframe_clouds(&load_clouds(clouds, &ids)?)?;
    let mut closures = Vec::new();
    for r in pipeline::register_candidates(&cands, &feats, &kc, &cfg)? {
        match r {
            Registration::Closure(c) => closures.push(c),
            Registration::Failed { from, to, reason } => eprintln!("warning: {from} {to}: {reason}"),
        }
    }
    write_text(&out_dir(g)?.join("closures.txt"), &format_closures(&closures))
}

fn read_sessions(paths: &[PathBuf]) -> Result<Vec<SessionGraph>> {
    let mut sessions: Vec<SessionGraph> = Vec::new();
    for p in paths {
        for s in read_graph(p)?.sessions {
            if sessions.iter().any(|x| x.session_id == s.session_id) {
                return Err(Error::param(format!("session {} appears twice", s.session_id)));
            }
            sessions.push(s);
        }
    }
    Ok(sessions)
}

pub fn merge(
    g: &Global,
    graphs: &[PathBuf],
    features: &Path,
    clouds: &Path,
    closures: Option<&Path>,
    scan_factors: bool,
) -> Result<()> {
    let cfg = config(g)?;
    let sessions = read_sessions(graphs)?;
    if sessions.len() < 2 {
        return Err(Error::param(format!("merging needs at least 2 sessions, got {}", sessions.len())));
    }
    let ids: BTreeSet<NodeId> = sessions
        .iter()
        .flat_map(|s| s.keyframes.iter().map(move |k| NodeId::new(s.session_id, k.id)))
        .collect();
    let kc = keyframe_clouds(&load_clouds(clouds, &ids)?)?;
    let opts = MergeOptions { scan_factors };
    let result = match closures {
        Some(path) => {
            pipeline::merge_registered(&sessions, &kc, Vec::new(), Vec::new(), read_closures(path)?, &cfg, &opts)?
        }
        None => {
            let feats = load_features(features, Some(&ids))?;
            pipeline::merge(&sessions, &kc, &feats, &cfg, &opts)?
        }
    };
    let dir = out_dir(g)?;
    write_graph(&dir.join("merged.graph"), &pipeline::merged_graph(&sessions, &result.merged.poses, &result.loop_factors))?;
    write_graph(
        &dir.join("preliminary.graph"),
        &pipeline::merged_graph(&sessions, &result.preliminary.poses, &result.loop_factors),
    )?;
    write_ply(&dir.join("merged.ply"), &pipeline::merged_cloud(&kc, &result.merged.poses, cfg.voxel_leaf)?)?;
    write_text(&dir.join("candidates.txt"), &format_candidates(&result.candidates))?;
    write_text(&dir.join("closures.txt"), &format_closures(&result.closures))?;
    write_text(&dir.join("report.txt"), &result.report_text(&sessions))
}

pub fn synth(g: &Global, scenario: &str, noiseless: bool) -> Result<()> {
    let cfg = config(g)?;
    let mut params = SynthParams::new(scenario.parse::<Scenario>()?, cfg.seed);
    if noiseless {
        params = params.noiseless();
    }
    let scene = generate(&params)?;
    let dir = out_dir(g)?;
    let cloud_dir = dir.join("clouds");
    fs::create_dir_all(&cloud_dir).map_err(|e| Error::io(&cloud_dir, e))?;
    for s in &scene.sessions {
        let file = GraphFile { sessions: vec![s.clone()], inter_edges: Vec::new() };
        write_graph(&dir.join(format!("session_{}.graph", s.session_id)), &file)?;
    }
    let truth = scene
        .sessions
        .iter()
        .map(|s| SessionGraph {
            session_id: s.session_id,
            keyframes: s
                .keyframes
                .iter()
                .map(|k| Keyframe { id: k.id, pose: scene.ground_truth[&NodeId::new(s.session_id, k.id)], cloud: None })
                .collect(),
            between_factors: Vec::new(),
        })
        .collect();
    write_graph(&dir.join("ground_truth.graph"), &GraphFile { sessions: truth, inter_edges: Vec::new() })?;
    let clouds: Vec<_> = scene.clouds.iter().collect();
    clouds
        .par_iter()
        .try_for_each(|(id, c)| write_ply(&node_path(&cloud_dir, **id, CLOUD_EXT), c))?;
    let mut overlap = String::new();
    for o in &scene.overlaps {
        let _ = writeln!(overlap, "OVERLAP {} {} {:?}", o.a, o.b, o.overlap);
    }
    write_text(&dir.join("overlap.txt"), &overlap)
}

pub fn eval(g: &Global, merged: &Path, truth: &Path, preliminary: Option<&Path>, closures: Option<&Path>) -> Result<()> {
    let merged = read_graph(merged)?;
    let ground_truth = read_graph(truth)?;
    let preliminary = preliminary.map(read_graph).transpose()?;
    let closures = closures.map(read_closures).transpose()?;
    let report = pipeline::evaluate(&EvalInput {
        merged: &merged,
        ground_truth: &ground_truth,
        preliminary: preliminary.as_ref(),
        closures: closures.as_deref(),
    })?;
    let dir = out_dir(g)?;
    write_text(&dir.join("eval.txt"), &report.to_text())?;
    for (name, curve) in [("distance", &report.pr_distance), ("inlier", &report.pr_inlier)] {
        if let Some(c) = curve {
            write_text(&dir.join(format!("pr_{name}.txt")), &pr_samples_text(c))?;
        }
    }
    let truth = ground_truth.poses();
    let mut traj = String::from("# node est_x est_y est_z gt_x gt_y gt_z\n");
    for (id, p) in merged.poses() {
        let (e, t) = (p.translation(), truth[&id].translation());
        let _ = writeln!(traj, "{id} {} {} {} {} {} {}", e.x, e.y, e.z, t.x, t.y, t.z);
    }
    write_text(&dir.join("trajectory.txt"), &traj)
}

pub fn synth_weights(g: &Global, geometric: bool) -> Result<()> {
    let cfg = config(g)?;
    let path = g.out.as_deref().ok_or_else(|| Error::param("--out is required"))?;
    let arch = cfg.architecture();
    let bundle = if geometric {
        WeightBundle::geometric(&arch, &cfg.betas())?
    } else {
        WeightBundle::synthesize(&arch, cfg.seed)?
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    bundle.write(path)
}
