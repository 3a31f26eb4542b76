//! Object-level camera relocalization against a dual-quadric map.
//!
//! The pipeline builds semantic graphs for the incoming frame and the map,
//! describes every node with a distance-weighted graph kernel, retrieves the
//! top-J most similar map objects per detection, matches them with a
//! RANSAC-style search over minimal P3P hypotheses, and finally refines the
//! camera pose by minimizing Wasserstein distances between detection ellipses
//! and projected quadrics.

pub mod association;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod harness;
pub mod pose;
pub mod semantics;

pub use error::{Error, Result};
