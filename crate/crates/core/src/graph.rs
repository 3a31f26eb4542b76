//! Semantic scene graphs and graph-kernel node descriptors.
//!
//! Frame graphs connect detections by the pixel distance between box
//! centers, map graphs connect objects by the metric distance between
//! centroids. Node `i` of a graph always corresponds to element `i` of the
//! detection or object slice it was built from.

use std::collections::VecDeque;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::{detection_distribution, CategoryDistribution, CategorySet, Detection, ObjectLandmark};

/// Default number of nearest neighbors per node.
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Frame,
    Map,
}

/// How the edge weight is derived from the Euclidean node distance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeWeighting {
    /// `w = d` (farther neighbors contribute more to the kernel).
    #[default]
    Distance,
    /// `w = 1 / d`.
    InverseDistance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Anchor {
    /// Box center, pixels.
    Pixel(Vector2<f64>),
    /// Quadric centroid, meters.
    Metric(Vector3<f64>),
}

impl Anchor {
    pub fn coords(&self) -> &[f64] {
        match self {
            Anchor::Pixel(v) => v.as_slice(),
            Anchor::Metric(v) => v.as_slice(),
        }
    }

    fn distance(&self, other: &Anchor) -> f64 {
        self.coords()
            .iter()
            .zip(other.coords())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    /// Detection index for frame graphs, object id for map graphs.
    pub id: u64,
    pub anchor: Anchor,
    pub distribution: CategoryDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub to: usize,
    pub weight: f64,
}

/// Undirected weighted KNN graph.
#[derive(Debug, Clone)]
pub struct SceneGraph {
    kind: GraphKind,
    nodes: Vec<GraphNode>,
    adjacency: Vec<Vec<Edge>>,
}

impl SceneGraph {
    /// Connects every node to its `k` nearest neighbors (ties to the lower
    /// node id) and closes the result under symmetry.
    pub fn knn(kind: GraphKind, nodes: Vec<GraphNode>, k: usize, weighting: EdgeWeighting) -> Self {
        let n = nodes.len();
        let mut adjacency: Vec<Vec<Edge>> = vec![Vec::new(); n];
        let mut scratch: Vec<(f64, u64, usize)> = Vec::with_capacity(n);
        for i in 0..n {
            scratch.clear();
            scratch.extend(
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (nodes[i].anchor.distance(&nodes[j].anchor), nodes[j].id, j)),
            );
            scratch.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(d, _, j) in scratch.iter().take(k) {
                let weight = match weighting {
                    EdgeWeighting::Distance => d,
                    EdgeWeighting::InverseDistance => 1.0 / d.max(1e-9),
                };
                for (a, b) in [(i, j), (j, i)] {
                    if !adjacency[a].iter().any(|e| e.to == b) {
                        adjacency[a].push(Edge { to: b, weight });
                    }
                }
            }
        }
        for list in &mut adjacency {
            list.sort_by_key(|e| e.to);
        }
        Self {
            kind,
            nodes,
            adjacency,
        }
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> Result<&GraphNode> {
        self.nodes.get(idx).ok_or(Error::UnknownNode(idx))
    }

    pub fn neighbors(&self, idx: usize) -> Result<&[Edge]> {
        self.adjacency
            .get(idx)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownNode(idx))
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn weight(&self, a: usize, b: usize) -> Option<f64> {
        self.adjacency
            .get(a)?
            .iter()
            .find(|e| e.to == b)
            .map(|e| e.weight)
    }

    /// Copy with every edge weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> SceneGraph {
        let mut g = self.clone();
        for e in g.adjacency.iter_mut().flatten() {
            e.weight *= factor;
        }
        g
    }

    /// Marks every node reachable from `src` in at most `max_hops` edges.
    pub fn within_hops(&self, src: usize, max_hops: usize) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        if src >= self.len() {
            return seen;
        }
        let mut queue = VecDeque::from([(src, 0)]);
        seen[src] = true;
        while let Some((v, d)) = queue.pop_front() {
            if d == max_hops {
                continue;
            }
            for e in &self.adjacency[v] {
                if !seen[e.to] {
                    seen[e.to] = true;
                    queue.push_back((e.to, d + 1));
                }
            }
        }
        seen
    }
}

/// Confidence and overlap thresholds for raw detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Detections scoring at or below this are dropped.
    pub min_score: f64,
    /// Boxes overlapping a better-scored kept box by more than this are dropped.
    pub max_overlap: f64,
    pub overlap: OverlapMeasure,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_score: 0.1,
            max_overlap: 0.6,
            overlap: OverlapMeasure::Iou,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OverlapMeasure {
    #[default]
    Iou,
    /// Intersection divided by the smaller box area.
    MinArea,
}

/// Confidence threshold followed by greedy non-maximum suppression.
/// Surviving detections keep their input order.
pub fn filter_detections(raw: &[Detection], cfg: &FilterConfig) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..raw.len()).filter(|&i| raw[i].score > cfg.min_score).collect();
    order.sort_by(|&a, &b| raw[b].score.total_cmp(&raw[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::with_capacity(order.len());
    for i in order {
        let suppressed = kept.iter().any(|&j| {
            let overlap = match cfg.overlap {
                OverlapMeasure::Iou => raw[i].bbox.iou(&raw[j].bbox),
                OverlapMeasure::MinArea => raw[i].bbox.overlap_min(&raw[j].bbox),
            };
            overlap > cfg.max_overlap
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| raw[i].clone()).collect()
}

pub fn build_frame_graph(
    dets: &[Detection],
    cats: &CategorySet,
    k: usize,
    weighting: EdgeWeighting,
) -> Result<SceneGraph> {
    let nodes = dets
        .iter()
        .enumerate()
        .map(|(i, d)| {
            Ok(GraphNode {
                id: i as u64,
                anchor: Anchor::Pixel(d.bbox.center()),
                distribution: detection_distribution(d, cats)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneGraph::knn(GraphKind::Frame, nodes, k, weighting))
}

pub fn build_map_graph(objects: &[ObjectLandmark], k: usize, weighting: EdgeWeighting) -> SceneGraph {
    let nodes = objects
        .iter()
        .map(|o| GraphNode {
            id: o.id,
            anchor: Anchor::Metric(*o.quadric.position()),
            distribution: o.distribution.clone(),
        })
        .collect();
    SceneGraph::knn(GraphKind::Map, nodes, k, weighting)
}

/// Unit-length (or zero) per-node descriptor over the category set.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelVector(Vec<f64>);

impl KernelVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// L2-normalizes `raw`; an all-zero input stays zero.
    pub fn normalized(mut raw: Vec<f64>) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            raw.iter_mut().for_each(|v| *v /= norm);
        }
        Self(raw)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

/// Sum of neighbor distributions weighted by edge weight, L2-normalized.
/// The root's own distribution does not contribute.
pub fn kernel_vector(g: &SceneGraph, root: usize) -> Result<KernelVector> {
    let dim = g.node(root)?.distribution.len();
    let mut acc = vec![0.0; dim];
    for e in g.neighbors(root)? {
        let p = g.nodes[e.to].distribution.as_slice();
        for (a, pk) in acc.iter_mut().zip(p) {
            *a += e.weight * pk;
        }
    }
    Ok(KernelVector::normalized(acc))
}

pub fn kernel_vectors(g: &SceneGraph) -> Vec<KernelVector> {
    (0..g.len())
        .map(|i| kernel_vector(g, i).expect("index in range"))
        .collect()
}

/// Cosine distance in `[0, 1]`; 1 when either vector is zero.
pub fn node_distance(a: &KernelVector, b: &KernelVector) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.0.iter().zip(&b.0) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 1.0)
}
