use std::collections::BTreeMap;
use std::path::PathBuf;

use nalgebra::Matrix6;

use crate::error::{Error, Result};
use crate::geometry::Pose;

pub type SessionId = u32;
pub type KeyframeId = u32;

/// Globally unique keyframe address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub session: SessionId,
    pub keyframe: KeyframeId,
}

impl NodeId {
    pub fn new(session: SessionId, keyframe: KeyframeId) -> Self {
        Self { session, keyframe }
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.session, self.keyframe)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub pose: Pose,
    pub cloud: Option<PathBuf>,
}

/// Gaussian relative-pose constraint. `measurement` is the pose of `to`
/// in the frame of `from`; information is in `(rotation, translation)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct BetweenFactor {
    pub from: KeyframeId,
    pub to: KeyframeId,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

/// One mapping session: keyframes in the session's own frame and the
/// intra-session constraints between them.
#[derive(Clone, Debug, PartialEq)]
pub struct SessionGraph {
    pub session_id: SessionId,
    pub keyframes: Vec<Keyframe>,
    pub between_factors: Vec<BetweenFactor>,
}

impl SessionGraph {
    pub fn new(session_id: SessionId) -> Self {
        Self {
            session_id,
            keyframes: Vec::new(),
            between_factors: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for kf in &self.keyframes {
            if !seen.insert(kf.id) {
                return Err(Error::Data(format!(
                    "session {}: duplicate keyframe id {}",
                    self.session_id, kf.id
                )));
            }
            kf.pose.validate()?;
        }
        for f in &self.between_factors {
            if !seen.contains(&f.from) || !seen.contains(&f.to) {
                return Err(Error::Data(format!(
                    "session {}: edge {}-{} references a missing keyframe",
                    self.session_id, f.from, f.to
                )));
            }
            check_information(&f.information)?;
        }
        Ok(())
    }

    pub fn pose(&self, id: KeyframeId) -> Option<&Pose> {
        self.keyframes.iter().find(|k| k.id == id).map(|k| &k.pose)
    }

    pub fn pose_map(&self) -> BTreeMap<KeyframeId, Pose> {
        self.keyframes.iter().map(|k| (k.id, k.pose)).collect()
    }
}

pub(crate) fn check_information(info: &Matrix6<f64>) -> Result<()> {
    if !info.iter().all(|v| v.is_finite()) {
        return Err(Error::Data("non-finite information matrix".into()));
    }
    if (info - info.transpose()).abs().max() > 1e-9 * info.abs().max().max(1.0) {
        return Err(Error::Data("information matrix is not symmetric".into()));
    }
    let min_eig = info.symmetric_eigenvalues().min();
    if min_eig < -1e-9 * info.abs().max().max(1.0) {
        return Err(Error::Data(format!(
            "information matrix is not PSD (eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

/// Inter-session relative-pose constraint stored in merged graph files.
#[derive(Clone, Debug, PartialEq)]
pub struct InterSessionEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

/// Contents of a pose-graph text file: any number of sessions plus optional
/// inter-session edges.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphFile {
    pub sessions: Vec<SessionGraph>,
    pub inter_edges: Vec<InterSessionEdge>,
}

impl GraphFile {
    pub fn session(&self, id: SessionId) -> Option<&SessionGraph> {
        self.sessions.iter().find(|s| s.session_id == id)
    }

    /// All keyframe poses keyed by node.
    pub fn poses(&self) -> BTreeMap<NodeId, Pose> {
        self.sessions
            .iter()
            .flat_map(|s| {
                s.keyframes
                    .iter()
                    .map(move |k| (NodeId::new(s.session_id, k.id), k.pose))
            })
            .collect()
    }
}
