//! Frame-by-frame relocalization against a fixed map.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::association::{
    build_label_index, candidate_sets, none_graph_candidates, random_walk_descriptor, random_walk_descriptors,
    ransac_relocalize, AssociationSet, CandidateSet, LabelIndex, Match, RansacParams, DEFAULT_J, DEFAULT_WALK_STEPS,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::graph::{
    build_frame_graph, build_map_graph, filter_detections, kernel_vectors, EdgeWeighting, FilterConfig, KernelVector,
    SceneGraph, DEFAULT_K,
};
use crate::pose::{refine_pose, RefinementConfig, RefinementOutcome};
use crate::semantics::{mode_label, CategorySet, Detection, ObjectLandmark};

/// How candidate map objects are retrieved for each detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Distance-weighted graph-kernel descriptors, top-J per label.
    #[default]
    GoReloc,
    /// Every object carrying the detection's label.
    NoneGraph,
    /// Random-walk label histograms, top-J per label.
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub method: Method,
    /// Neighbors per node in both graphs.
    pub k: usize,
    /// Candidates kept per detection.
    pub j: usize,
    pub weighting: EdgeWeighting,
    pub filter: FilterConfig,
    pub ransac: RansacParams,
    pub refinement: RefinementConfig,
    /// Skip pose refinement and report the RANSAC pose.
    pub skip_refinement: bool,
    pub walk_steps: usize,
    pub walks: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            method: Method::GoReloc,
            k: DEFAULT_K,
            j: DEFAULT_J,
            weighting: EdgeWeighting::Distance,
            filter: FilterConfig::default(),
            ransac: RansacParams::default(),
            refinement: RefinementConfig::default(),
            skip_refinement: false,
            walk_steps: DEFAULT_WALK_STEPS,
            walks: 50,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.j < 1 {
            return Err(Error::InvariantViolation("k and j must be at least 1".into()));
        }
        if self.method == Method::RandomWalk && (self.walk_steps < 1 || self.walks < 1) {
            return Err(Error::InvariantViolation("random walks need steps >= 1 and walks >= 1".into()));
        }
        self.ransac.validate()?;
        self.refinement.validate()
    }
}

/// Wall-clock time spent in each stage of one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    /// Detection filtering and label distributions.
    pub frame_processing: Duration,
    /// Frame graph and node descriptors.
    pub graph_generation: Duration,
    /// Candidate retrieval and hypothesis search.
    pub subgraph_extraction: Duration,
    pub refinement: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.frame_processing + self.graph_generation + self.subgraph_extraction + self.refinement
    }

    pub fn add(&mut self, other: &StageTimings) {
        self.frame_processing += other.frame_processing;
        self.graph_generation += other.graph_generation;
        self.subgraph_extraction += other.subgraph_extraction;
        self.refinement += other.refinement;
    }
}

/// A successful relocalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Relocalization {
    /// Indices refer to the frame's detections as given (before filtering).
    pub associations: AssociationSet,
    pub initial_pose: PoseSE3,
    pub pose: PoseSE3,
    pub inliers: usize,
    pub refinement: Option<RefinementOutcome>,
}

#[derive(Debug)]
pub struct FrameResult {
    pub kept_detections: usize,
    /// Per kept detection: the retrieved candidate object indices.
    pub candidates: CandidateSet,
    pub outcome: Result<Relocalization>,
    pub timings: StageTimings,
}

/// Immutable map-side state shared by all frames.
#[derive(Debug, Clone)]
pub struct Relocalizer {
    categories: CategorySet,
    objects: Vec<ObjectLandmark>,
    camera: CameraIntrinsics,
    config: PipelineConfig,
    map_graph: SceneGraph,
    index: LabelIndex,
}

impl Relocalizer {
    pub fn new(
        categories: CategorySet,
        objects: Vec<ObjectLandmark>,
        camera: CameraIntrinsics,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        for o in &objects {
            if o.distribution.len() != categories.len() {
                return Err(Error::InvariantViolation(format!("object {} distribution size mismatch", o.id)));
            }
            mode_label(&o.distribution)?;
        }
        let map_graph = build_map_graph(&objects, config.k, config.weighting);
        let descriptors = match config.method {
            Method::GoReloc | Method::NoneGraph => kernel_vectors(&map_graph),
            Method::RandomWalk => random_walk_descriptors(&map_graph, config.walk_steps, config.walks, config.ransac.seed),
        };
        let index = build_label_index(&map_graph, &descriptors);
        Ok(Self {
            categories,
            objects,
            camera,
            config,
            map_graph,
            index,
        })
    }

    pub fn objects(&self) -> &[ObjectLandmark] {
        &self.objects
    }

    pub fn categories(&self) -> &CategorySet {
        &self.categories
    }

    pub fn camera(&self) -> &CameraIntrinsics {
        &self.camera
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn map_graph(&self) -> &SceneGraph {
        &self.map_graph
    }

    /// Frame-node descriptors for the configured method.
    fn frame_descriptors(&self, g: &SceneGraph) -> Vec<KernelVector> {
        match self.config.method {
            Method::GoReloc => kernel_vectors(g),
            Method::NoneGraph => Vec::new(),
            Method::RandomWalk => (0..g.len())
                .map(|i| {
                    random_walk_descriptor(g, i, self.config.walk_steps, self.config.walks, self.config.ransac.seed)
                        .expect("node index in range")
                })
                .collect(),
        }
    }

    fn retrieve(&self, g: &SceneGraph, descriptors: &[KernelVector]) -> CandidateSet {
        match self.config.method {
            Method::NoneGraph => CandidateSet::new(
                g.nodes()
                    .iter()
                    .map(|n| match mode_label(&n.distribution) {
                        Ok(label) => none_graph_candidates(label, &self.map_graph),
                        Err(_) => Vec::new(),
                    })
                    .collect(),
            ),
            Method::GoReloc | Method::RandomWalk => candidate_sets(g, descriptors, &self.index, self.config.j),
        }
    }

    /// Runs the whole pipeline on one frame's raw detections.
    pub fn relocalize(&self, raw: &[Detection]) -> FrameResult {
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let kept_idx = self.kept_indices(raw);
        let kept: Vec<Detection> = kept_idx.iter().map(|&i| raw[i].clone()).collect();
        timings.frame_processing = t.elapsed();

        let t = Instant::now();
        let frame_graph = build_frame_graph(&kept, &self.categories, self.config.k, self.config.weighting);
        let descriptors = frame_graph.as_ref().map(|g| self.frame_descriptors(g)).unwrap_or_default();
        timings.graph_generation = t.elapsed();

        let frame_graph = match frame_graph {
            Ok(g) => g,
            Err(e) => {
                return FrameResult {
                    kept_detections: kept.len(),
                    candidates: CandidateSet::default(),
                    outcome: Err(e),
                    timings,
                }
            }
        };

        let t = Instant::now();
        let candidates = self.retrieve(&frame_graph, &descriptors);
        let ransac = ransac_relocalize(&frame_graph, &self.map_graph, &candidates, &self.camera, &self.config.ransac);
        timings.subgraph_extraction = t.elapsed();

        let t = Instant::now();
        let outcome = ransac.and_then(|r| {
            let refinement = if self.config.skip_refinement {
                None
            } else {
                Some(refine_pose(&r.associations, &self.objects, &kept, &r.pose, &self.camera, &self.config.refinement)?)
            };
            let associations = AssociationSet::new(
                r.associations
                    .matches()
                    .iter()
                    .map(|m| Match {
                        detection: kept_idx[m.detection],
                        ..*m
                    })
                    .collect(),
            )?;
            Ok(Relocalization {
                associations,
                initial_pose: r.pose,
                pose: refinement.map_or(r.pose, |o| o.pose),
                inliers: r.inliers,
                refinement,
            })
        });
        timings.refinement = t.elapsed();

        FrameResult {
            kept_detections: kept.len(),
            candidates,
            outcome,
            timings,
        }
    }

    /// Indices of detections surviving the score and overlap filter, in input order.
    fn kept_indices(&self, raw: &[Detection]) -> Vec<usize> {
        let kept = filter_detections(raw, &self.config.filter);
        let mut used = vec![false; raw.len()];
        kept.iter()
            .map(|k| {
                let i = (0..raw.len())
                    .find(|&i| !used[i] && raw[i] == *k)
                    .expect("filter returns input detections");
                used[i] = true;
                i
            })
            .collect()
    }
}
