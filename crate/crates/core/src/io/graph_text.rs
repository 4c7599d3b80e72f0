//! Line-oriented pose-graph text format.
//!
//! ```text
//! # session 0
//! VERTEX id tx ty tz qx qy qz qw
//! EDGE id_a id_b tx ty tz qx qy qz qw i11 i12 .. i16 i22 .. i66
//! # inter 0 1
//! EDGE id_a id_b ...
//! ```
//!
//! The 21 information values are the upper triangle of the 6x6 matrix, row
//! major, in `(tx, ty, tz, rx, ry, rz)` order. Internally information uses
//! `(rotation, translation)` order; conversion happens here. Quaternions must
//! be unit norm within 1e-6 and are renormalized on read. Other `#` lines are
//! comments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix6, Vector3};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::graph::{BetweenFactor, GraphFile, InterSessionEdge, Keyframe, NodeId, SessionGraph};

const QUAT_TOL: f64 = 1e-6;

/// File order `(t, r)` index -> internal `(r, t)` index.
fn to_internal(i: usize) -> usize {
    (i + 3) % 6
}

enum Section {
    Session(usize),
    Inter(u32, u32),
}

pub fn parse_graph(text: &str) -> std::result::Result<GraphFile, String> {
    let mut file = GraphFile::default();
    let mut section: Option<Section> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let err = |msg: String| format!("line {}: {msg}", lineno + 1);
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let tok: Vec<&str> = rest.split_whitespace().collect();
            match tok.as_slice() {
                ["session", id] => {
                    let id: u32 = id.parse().map_err(|_| err(format!("bad session id '{id}'")))?;
                    if file.session(id).is_some() {
                        return Err(err(format!("session {id} declared twice")));
                    }
                    file.sessions.push(SessionGraph::new(id));
                    section = Some(Section::Session(file.sessions.len() - 1));
                }
                ["inter", a, b] => {
                    let a = a.parse().map_err(|_| err(format!("bad session id '{a}'")))?;
                    let b = b.parse().map_err(|_| err(format!("bad session id '{b}'")))?;
                    section = Some(Section::Inter(a, b));
                }
                _ => {}
            }
            continue;
        }
        let tok: Vec<&str> = line.split_whitespace().collect();
        if section.is_none() {
            file.sessions.push(SessionGraph::new(0));
            section = Some(Section::Session(0));
        }
        let nums = |from: usize| -> std::result::Result<Vec<f64>, String> {
            tok[from..]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number '{t}'"))))
                .collect()
        };
        let id = |t: &str| t.parse::<u32>().map_err(|_| err(format!("bad id '{t}'")));
        match (tok[0], &section) {
            ("VERTEX", Some(Section::Session(s))) => {
                if tok.len() != 9 {
                    return Err(err(format!("VERTEX needs 8 fields, got {}", tok.len() - 1)));
                }
                let v = nums(2)?;
                let pose = parse_pose(&v).map_err(|e| err(e.to_string()))?;
                file.sessions[*s].keyframes.push(Keyframe {
                    id: id(tok[1])?,
                    pose,
                    cloud: None,
                });
            }
            ("EDGE", Some(sec)) => {
                if tok.len() != 3 + 7 + 21 {
                    return Err(err(format!("EDGE needs 30 fields, got {}", tok.len() - 1)));
                }
                let (a, b) = (id(tok[1])?, id(tok[2])?);
                let v = nums(3)?;
                let measurement = parse_pose(&v[..7]).map_err(|e| err(e.to_string()))?;
                let information = parse_information(&v[7..]);
                match sec {
                    Section::Session(s) => file.sessions[*s].between_factors.push(BetweenFactor {
                        from: a,
                        to: b,
                        measurement,
                        information,
                    }),
                    Section::Inter(sa, sb) => file.inter_edges.push(InterSessionEdge {
                        from: NodeId::new(*sa, a),
                        to: NodeId::new(*sb, b),
                        measurement,
                        information,
                    }),
                }
            }
            ("VERTEX", _) => return Err(err("VERTEX outside a session section".into())),
            (other, _) => return Err(err(format!("unknown record '{other}'"))),
        }
    }
    for s in &file.sessions {
        s.validate().map_err(|e| e.to_string())?;
    }
    Ok(file)
}

fn parse_pose(v: &[f64]) -> Result<Pose> {
    Pose::from_quaternion_xyzw(Vector3::new(v[0], v[1], v[2]), [v[3], v[4], v[5], v[6]], QUAT_TOL)
}

fn parse_information(v: &[f64]) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    let mut k = 0;
    for i in 0..6 {
        for j in i..6 {
            let (a, b) = (to_internal(i), to_internal(j));
            m[(a, b)] = v[k];
            m[(b, a)] = v[k];
            k += 1;
        }
    }
    m
}

fn push_pose(out: &mut String, p: &Pose) {
    let t = p.translation();
    let q = p.quaternion_xyzw();
    let _ = write!(out, " {} {} {} {} {} {} {}", t.x, t.y, t.z, q[0], q[1], q[2], q[3]);
}

fn push_information(out: &mut String, m: &Matrix6<f64>) {
    for i in 0..6 {
        for j in i..6 {
            let _ = write!(out, " {}", m[(to_internal(i), to_internal(j))]);
        }
    }
}

pub fn format_graph(file: &GraphFile) -> String {
    let mut out = String::new();
    for s in &file.sessions {
        let _ = writeln!(out, "# session {}", s.session_id);
        for k in &s.keyframes {
            let _ = write!(out, "VERTEX {}", k.id);
            push_pose(&mut out, &k.pose);
            out.push('\n');
        }
        for e in &s.between_factors {
            let _ = write!(out, "EDGE {} {}", e.from, e.to);
            push_pose(&mut out, &e.measurement);
            push_information(&mut out, &e.information);
            out.push('\n');
        }
    }
    let mut current: Option<(u32, u32)> = None;
    for e in &file.inter_edges {
        let key = (e.from.session, e.to.session);
        if current != Some(key) {
            let _ = writeln!(out, "# inter {} {}", key.0, key.1);
            current = Some(key);
        }
        let _ = write!(out, "EDGE {} {}", e.from.keyframe, e.to.keyframe);
        push_pose(&mut out, &e.measurement);
        push_information(&mut out, &e.information);
        out.push('\n');
    }
    out
}

pub fn read_graph(path: &Path) -> Result<GraphFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text).map_err(|msg| Error::format(path, msg))
}

pub fn write_graph(path: &Path, file: &GraphFile) -> Result<()> {
    fs::write(path, format_graph(file)).map_err(|e| Error::io(path, e))
}
