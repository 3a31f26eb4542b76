//! Category distributions for detections and map objects.
//!
//! A detection carries its confidence as probability mass on its own label
//! only; map objects pool the evidence from every keyframe that observed them
//! into a normalized distribution.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{inscribed_ellipse, BoundingBox, DualQuadric, Ellipse2D};

/// Position of a category inside a [`CategorySet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CategoryId(pub usize);

/// Ordered, duplicate-free list of category names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySet {
    names: Vec<String>,
    index: HashMap<String, CategoryId>,
}

impl CategorySet {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::with_capacity(names.len());
        for (i, name) in names.iter().enumerate() {
            if index.insert(name.clone(), CategoryId(i)).is_some() {
                return Err(Error::InvariantViolation(format!("duplicate category `{name}`")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Result<CategoryId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownCategory(name.to_string()))
    }

    pub fn name(&self, id: CategoryId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, id: CategoryId) -> bool {
        id.0 < self.names.len()
    }
}

/// Dense probability mass over a category set.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryDistribution(Vec<f64>);

impl CategoryDistribution {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    /// Wraps raw mass values; they must be finite and non-negative.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvariantViolation(
                "category mass must be finite and non-negative".into(),
            ));
        }
        Ok(Self(values))
    }

    pub fn one_hot(len: usize, id: CategoryId, mass: f64) -> Self {
        let mut v = vec![0.0; len];
        v[id.0] = mass;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: CategoryId) -> f64 {
        self.0.get(id.0).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Argmax category; ties go to the lowest index.
pub fn mode_label(dist: &CategoryDistribution) -> Result<CategoryId> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &p) in dist.0.iter().enumerate() {
        if p > 0.0 && best.is_none_or(|(_, b)| p > b) {
            best = Some((i, p));
        }
    }
    best.map(|(i, _)| CategoryId(i)).ok_or(Error::ZeroDistribution)
}

/// A filtered object detection in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub label: CategoryId,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, label: CategoryId, score: f64) -> Result<Self> {
        if !(score > 0.0 && score <= 1.0) {
            return Err(Error::InvariantViolation(format!(
                "detection score {score} outside (0, 1]"
            )));
        }
        Ok(Self { bbox, label, score })
    }

    pub fn ellipse(&self) -> Ellipse2D {
        // a BoundingBox always has positive extent
        inscribed_ellipse(&self.bbox).expect("bounding box with positive extent")
    }
}

/// Probability mass of a single detection: its score on its own label.
pub fn detection_distribution(d: &Detection, cats: &CategorySet) -> Result<CategoryDistribution> {
    if !cats.contains(d.label) {
        return Err(Error::UnknownCategory(format!("#{}", d.label.0)));
    }
    Ok(CategoryDistribution::one_hot(cats.len(), d.label, d.score))
}

/// One keyframe observation of a map object.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub keyframe: u64,
    pub label: CategoryId,
    pub score: f64,
}

/// Pools per-detection mass and normalizes it to sum to one.
pub fn object_distribution(
    observations: &[(CategoryId, f64)],
    cats: &CategorySet,
) -> Result<CategoryDistribution> {
    if observations.is_empty() {
        return Err(Error::NoObservations);
    }
    let mut acc = vec![0.0; cats.len()];
    for &(label, score) in observations {
        if !cats.contains(label) {
            return Err(Error::UnknownCategory(format!("#{}", label.0)));
        }
        acc[label.0] += score;
    }
    normalize_mass(acc)
}

/// Same pooling for observations that carry full per-category mass vectors.
pub fn pool_distributions(
    observations: &[CategoryDistribution],
    cats: &CategorySet,
) -> Result<CategoryDistribution> {
    if observations.is_empty() {
        return Err(Error::NoObservations);
    }
    let mut acc = vec![0.0; cats.len()];
    for obs in observations {
        if obs.len() != cats.len() {
            return Err(Error::InvariantViolation(format!(
                "distribution has {} entries, category set has {}",
                obs.len(),
                cats.len()
            )));
        }
        for (a, p) in acc.iter_mut().zip(obs.as_slice()) {
            *a += p;
        }
    }
    normalize_mass(acc)
}

fn normalize_mass(acc: Vec<f64>) -> Result<CategoryDistribution> {
    let total: f64 = acc.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroDistribution);
    }
    CategoryDistribution::from_vec(acc.into_iter().map(|v| v / total).collect())
}

/// A map object: a dual quadric plus its pooled category distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLandmark {
    pub id: u64,
    pub quadric: DualQuadric,
    pub distribution: CategoryDistribution,
    pub observations: Vec<Observation>,
}

impl ObjectLandmark {
    /// Builds the landmark and derives its distribution from `observations`.
    pub fn from_observations(
        id: u64,
        quadric: DualQuadric,
        observations: Vec<Observation>,
        cats: &CategorySet,
    ) -> Result<Self> {
        let pairs: Vec<_> = observations.iter().map(|o| (o.label, o.score)).collect();
        let distribution = object_distribution(&pairs, cats)?;
        Ok(Self {
            id,
            quadric,
            distribution,
            observations,
        })
    }

    pub fn with_distribution(id: u64, quadric: DualQuadric, distribution: CategoryDistribution) -> Self {
        Self {
            id,
            quadric,
            distribution,
            observations: Vec::new(),
        }
    }

    pub fn label(&self) -> Result<CategoryId> {
        mode_label(&self.distribution)
    }
}
