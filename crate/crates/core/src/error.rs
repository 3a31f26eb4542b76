use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the relocalization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point lies behind the camera (camera-frame depth {depth})")]
    PointBehindCamera { depth: f64 },
    #[error("degenerate conic: {0}")]
    DegenerateConic(String),
    #[error("bounding box has non-positive extent")]
    EmptyBox,
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("object has no observations")]
    NoObservations,
    #[error("category distribution is all zero")]
    ZeroDistribution,
    #[error("node {0} is not part of the graph")]
    UnknownNode(usize),
    #[error("only {available} usable detections, at least {required} required")]
    InsufficientDetections { available: usize, required: usize },
    #[error("no candidate combination produced a valid pose")]
    NoValidPose,
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("solver found no solution")]
    NoSolution,
    #[error("association set has no inliers")]
    NoInliers,
    #[error("all {dropped} matched quadrics left the camera frustum")]
    DivergedBehindCamera { dropped: usize },
    #[error("no ground-truth pose within 50 ms of timestamp {timestamp}")]
    NoGroundTruth { timestamp: f64 },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    /// True for malformed input files and configuration, as opposed to
    /// numerical failures during relocalization.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::InvariantViolation(_)
                | Error::UnknownCategory(_)
                | Error::Io { .. }
                | Error::EmptyBox
                | Error::NoObservations
        )
    }
}
