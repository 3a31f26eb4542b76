//! Candidate retrieval and RANSAC-style node matching.

mod index;
mod random_walk;
mod ransac;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use index::{build_label_index, candidate_set, candidate_sets, none_graph_candidates, Candidate, CandidateSet, LabelIndex};
pub use random_walk::{random_walk_descriptor, random_walk_descriptors, DEFAULT_WALK_STEPS};
pub use ransac::{ransac_relocalize, RansacOutcome};

/// Default number of candidates kept per detection.
pub const DEFAULT_J: usize = 5;

/// One detection paired with one map object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    /// Index into the frame's detections (= frame-graph node).
    pub detection: usize,
    /// Index into the map objects (= map-graph node).
    pub object: usize,
    pub inlier: bool,
    /// Center reprojection error under the hypothesis pose, pixels.
    pub reprojection_error: f64,
}

/// Detection-to-object matches: every detection appears at most once and no
/// object is claimed by two inliers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssociationSet {
    matches: Vec<Match>,
}

impl AssociationSet {
    pub fn new(mut matches: Vec<Match>) -> Result<Self> {
        matches.sort_by_key(|m| m.detection);
        if matches.windows(2).any(|w| w[0].detection == w[1].detection) {
            return Err(Error::InvariantViolation("detection matched twice".into()));
        }
        let mut objects: Vec<usize> = matches.iter().filter(|m| m.inlier).map(|m| m.object).collect();
        objects.sort_unstable();
        if objects.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvariantViolation("object claimed by two inliers".into()));
        }
        Ok(Self { matches })
    }

    /// All pairs flagged as inliers, e.g. a ground-truth association.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(detection, object)| Match {
                    detection,
                    object,
                    inlier: true,
                    reprojection_error: 0.0,
                })
                .collect(),
        )
    }

    pub fn matches(&self) -> &[Match] {
        &self.matches
    }

    pub fn inliers(&self) -> impl Iterator<Item = &Match> {
        self.matches.iter().filter(|m| m.inlier)
    }

    pub fn inlier_count(&self) -> usize {
        self.inliers().count()
    }

    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// Object matched (as inlier) to `detection`, if any.
    pub fn object_for(&self, detection: usize) -> Option<usize> {
        self.inliers().find(|m| m.detection == detection).map(|m| m.object)
    }
}

/// Sampling and scoring parameters for [`ransac_relocalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    /// Detections sampled per hypothesis.
    pub num: usize,
    pub max_iter: usize,
    /// Pixels.
    pub inlier_threshold: f64,
    pub seed: u64,
    /// Candidates of adjacent frame nodes must lie within this many hops in
    /// the map graph; `None` disables the check.
    pub connectivity_hops: Option<usize>,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            num: 3,
            max_iter: 50,
            inlier_threshold: 40.0,
            seed: 0,
            connectivity_hops: Some(2),
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.num < 3 || self.max_iter < 1 || !(self.inlier_threshold > 0.0) {
            return Err(Error::InvariantViolation(format!(
                "RANSAC needs num >= 3, max_iter >= 1, inlier threshold > 0 (got {}, {}, {})",
                self.num, self.max_iter, self.inlier_threshold
            )));
        }
        Ok(())
    }
}
