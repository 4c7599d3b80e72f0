//! On-disk layout shared by the commands.
//!
//! Keyframe artifacts are named `s{session}_k{keyframe}` plus an extension
//! (`.ply` clouds, `.gmldf` features). Loop candidates and closures are
//! whitespace-separated text, one record per line:
//!
//! ```text
//! CANDIDATE from to distance
//! CLOSURE from to distance inlier_ratio alignment_error status tx ty tz qx qy qz qw
//! ```
//!
//! where nodes are written `session:keyframe`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::graph::NodeId;
use crate::verification::{ClosureStatus, LoopClosure};

pub const CLOUD_EXT: &str = "ply";
pub const FEATURE_EXT: &str = "gmldf";

pub fn node_stem(id: NodeId) -> String {
    format!("s{}_k{}", id.session, id.keyframe)
}

pub fn parse_stem(stem: &str) -> Option<NodeId> {
    let rest = stem.strip_prefix('s')?;
    let (s, k) = rest.split_once("_k")?;
    let id = NodeId::new(s.parse().ok()?, k.parse().ok()?);
    (node_stem(id) == stem).then_some(id)
}

pub fn node_path(dir: &Path, id: NodeId, ext: &str) -> PathBuf {
    dir.join(format!("{}.{ext}", node_stem(id)))
}

/// Files of `dir` with extension `ext` and a keyframe stem, keyed by node.
pub fn list_nodes(dir: &Path, ext: &str) -> Result<BTreeMap<NodeId, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(parse_stem) {
            out.insert(id, path);
        }
    }
    Ok(out)
}

pub fn parse_node(tok: &str) -> Option<NodeId> {
    let (s, k) = tok.split_once(':')?;
    Some(NodeId::new(s.parse().ok()?, k.parse().ok()?))
}

/// A descriptor-space loop candidate: `to` was the best match of `from`
/// (or the reverse) with the given inter-scan distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopCandidate {
    pub from: NodeId,
    pub to: NodeId,
    pub distance: f64,
}

pub fn format_candidates(c: &[LoopCandidate]) -> String {
    let mut out = String::new();
    for c in c {
        let _ = writeln!(out, "CANDIDATE {} {} {:?}", c.from, c.to, c.distance);
    }
    out
}

/// Non-empty, non-comment lines split into tokens, with 1-based line numbers.
fn records(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(n, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (n + 1, l.split_whitespace().collect()))
    })
}

fn bad(n: usize, msg: impl std::fmt::Display) -> String {
    format!("line {n}: {msg}")
}

fn nodes(n: usize, a: &str, b: &str) -> std::result::Result<(NodeId, NodeId), String> {
    let pa = parse_node(a).ok_or_else(|| bad(n, format!("bad node '{a}'")))?;
    let pb = parse_node(b).ok_or_else(|| bad(n, format!("bad node '{b}'")))?;
    Ok((pa, pb))
}

fn numbers(n: usize, tok: &[&str]) -> std::result::Result<Vec<f64>, String> {
    tok.iter()
        .map(|t| t.parse::<f64>().map_err(|_| bad(n, format!("bad number '{t}'"))))
        .collect()
}

pub fn parse_candidates(text: &str) -> std::result::Result<Vec<LoopCandidate>, String> {
    let mut out = Vec::new();
    for (n, tok) in records(text) {
        if tok[0] != "CANDIDATE" || tok.len() != 4 {
            return Err(bad(n, "expected 'CANDIDATE from to distance'"));
        }
        let (from, to) = nodes(n, tok[1], tok[2])?;
        let distance = numbers(n, &tok[3..])?[0];
        out.push(LoopCandidate { from, to, distance });
    }
    Ok(out)
}

pub fn format_closures(closures: &[LoopClosure]) -> String {
    let mut out = String::new();
    for c in closures {
        let t = c.relative_pose.translation();
        let q = c.relative_pose.quaternion_xyzw();
        let _ = writeln!(
            out,
            "CLOSURE {} {} {:?} {:?} {:?} {} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            c.from,
            c.to,
            c.descriptor_distance,
            c.inlier_ratio,
            c.alignment_error,
            c.status.as_str(),
            t.x,
            t.y,
            t.z,
            q[0],
            q[1],
            q[2],
            q[3]
        );
    }
    out
}

pub fn parse_closures(text: &str) -> std::result::Result<Vec<LoopClosure>, String> {
    let mut out = Vec::new();
    for (n, tok) in records(text) {
        if tok[0] != "CLOSURE" || tok.len() != 14 {
            return Err(bad(n, "expected a CLOSURE record with 13 fields"));
        }
        let (from, to) = nodes(n, tok[1], tok[2])?;
        let head = numbers(n, &tok[3..6])?;
        let status = ClosureStatus::parse(tok[6]).ok_or_else(|| bad(n, format!("bad status '{}'", tok[6])))?;
        let p = numbers(n, &tok[7..])?;
        let relative_pose = Pose::from_quaternion_xyzw(Vector3::new(p[0], p[1], p[2]), [p[3], p[4], p[5], p[6]], 1e-6)
            .map_err(|e| bad(n, e))?;
        let lc = LoopClosure {
            from,
            to,
            relative_pose,
            inlier_ratio: head[1],
            alignment_error: head[2],
            descriptor_distance: head[0],
            status,
        };
        lc.validate().map_err(|e| bad(n, e))?;
        out.push(lc);
    }
    Ok(out)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_candidates(path: &Path) -> Result<Vec<LoopCandidate>> {
    parse_candidates(&read_text(path)?).map_err(|msg| Error::format(path, msg))
}

pub fn read_closures(path: &Path) -> Result<Vec<LoopClosure>> {
    parse_closures(&read_text(path)?).map_err(|msg| Error::format(path, msg))
}
