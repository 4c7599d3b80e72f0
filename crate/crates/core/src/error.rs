use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("degenerate neighborhood: {0}")]
    DegenerateNeighborhood(String),

    #[error("insufficient density at {stage}: {points} points, need at least {required}")]
    InsufficientDensity {
        stage: String,
        points: usize,
        required: usize,
    },

    #[error("degenerate correspondences: {0}")]
    DegenerateCorrespondences(String),

    #[error("registration failed: {0}")]
    RegistrationFailed(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unmergeable sessions: {}", fmt_ids(.0))]
    Unmergeable(Vec<u32>),

    #[error("undefined metrics: {0}")]
    UndefinedMetrics(String),

    #[error("config: {0}")]
    Config(String),

    #[error("weight bundle: {0}")]
    Weights(String),

    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_ids(ids: &[u32]) -> String {
    ids.iter()
        .map(|id| id.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Error {
    /// Stable machine-readable code, used as the prefix of CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "E_PARAM",
            Error::EmptyInput(_) => "E_EMPTY",
            Error::InvalidGeometry(_) => "E_GEOMETRY",
            Error::DegenerateNeighborhood(_) => "E_DEGENERATE_NEIGHBORHOOD",
            Error::InsufficientDensity { .. } => "E_DENSITY",
            Error::DegenerateCorrespondences(_) => "E_DEGENERATE_CORRESPONDENCES",
            Error::RegistrationFailed(_) => "E_REGISTRATION",
            Error::Data(_) => "E_DATA",
            Error::Unmergeable(_) => "E_UNMERGEABLE",
            Error::UndefinedMetrics(_) => "E_METRICS",
            Error::Config(_) => "E_CONFIG",
            Error::Weights(_) => "E_WEIGHTS",
            Error::Format { .. } => "E_FORMAT",
            Error::Io { .. } => "E_IO",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
