use std::collections::BTreeMap;

use crate::graph::{node_distance, KernelVector, SceneGraph};
use crate::semantics::{mode_label, CategoryId};

/// A retrieved map node and its descriptor distance to the query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Map-graph node index.
    pub node: usize,
    /// Cosine distance to the query descriptor; 0 for unranked retrieval.
    pub distance: f64,
}

#[derive(Debug, Clone)]
struct IndexEntry {
    node: usize,
    id: u64,
    descriptor: KernelVector,
}

/// Map nodes bucketed by their most likely label.
#[derive(Debug, Clone, Default)]
pub struct LabelIndex {
    buckets: BTreeMap<CategoryId, Vec<IndexEntry>>,
}

impl LabelIndex {
    pub fn labels(&self) -> impl Iterator<Item = CategoryId> + '_ {
        self.buckets.keys().copied()
    }

    /// Node indices filed under `label`, ordered by node id.
    pub fn nodes(&self, label: CategoryId) -> Vec<usize> {
        self.buckets
            .get(&label)
            .map(|v| v.iter().map(|e| e.node).collect())
            .unwrap_or_default()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }
}

/// Files every map node with a non-zero distribution under its mode label,
/// together with its descriptor (`descriptors[i]` belongs to node `i`).
pub fn build_label_index(map_graph: &SceneGraph, descriptors: &[KernelVector]) -> LabelIndex {
    let mut buckets: BTreeMap<CategoryId, Vec<IndexEntry>> = BTreeMap::new();
    for (node, (n, d)) in map_graph.nodes().iter().zip(descriptors).enumerate() {
        if let Ok(label) = mode_label(&n.distribution) {
            buckets.entry(label).or_default().push(IndexEntry {
                node,
                id: n.id,
                descriptor: d.clone(),
            });
        }
    }
    for list in buckets.values_mut() {
        list.sort_by_key(|e| e.id);
    }
    LabelIndex { buckets }
}

/// The `j` map nodes under `label` closest to `query`, nearest first; ties
/// go to the lower node id.
pub fn candidate_set(label: CategoryId, query: &KernelVector, index: &LabelIndex, j: usize) -> Vec<Candidate> {
    let Some(bucket) = index.buckets.get(&label) else {
        return Vec::new();
    };
    let mut scored: Vec<(f64, u64, usize)> = bucket
        .iter()
        .map(|e| (node_distance(query, &e.descriptor), e.id, e.node))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored
        .into_iter()
        .take(j)
        .map(|(distance, _, node)| Candidate { node, distance })
        .collect()
}

/// Every map node whose mode label equals `label`, in node-id order.
pub fn none_graph_candidates(label: CategoryId, map_graph: &SceneGraph) -> Vec<Candidate> {
    let mut out: Vec<(u64, usize)> = map_graph
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| mode_label(&n.distribution).is_ok_and(|l| l == label))
        .map(|(i, n)| (n.id, i))
        .collect();
    out.sort_unstable();
    out.into_iter()
        .map(|(_, node)| Candidate { node, distance: 0.0 })
        .collect()
}

/// Candidate lists for every node of a frame graph; entry `i` serves frame node `i`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    lists: Vec<Vec<Candidate>>,
}

impl CandidateSet {
    pub fn new(lists: Vec<Vec<Candidate>>) -> Self {
        Self { lists }
    }

    pub fn for_node(&self, frame_node: usize) -> &[Candidate] {
        self.lists.get(frame_node).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[Candidate]> {
        self.lists.iter().map(Vec::as_slice)
    }
}

/// Top-`j` retrieval for every frame node, keyed by the node's detection label.
pub fn candidate_sets(frame_graph: &SceneGraph, frame_descriptors: &[KernelVector], index: &LabelIndex, j: usize) -> CandidateSet {
    CandidateSet::new(
        frame_graph
            .nodes()
            .iter()
            .zip(frame_descriptors)
            .map(|(n, d)| match mode_label(&n.distribution) {
                Ok(label) => candidate_set(label, d, index, j),
                Err(_) => Vec::new(),
            })
            .collect(),
    )
}
