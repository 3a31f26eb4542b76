use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{KernelVector, SceneGraph};
use crate::semantics::mode_label;

pub const DEFAULT_WALK_STEPS: usize = 5;

/// Label histogram of `walks` uniform random walks of `steps` hops from
/// `root`, L2-normalized. Visits to the root itself are not counted.
///
/// The RNG stream is derived from `(seed, root)`, so the descriptor of a node
/// does not depend on which other nodes were described before it.
pub fn random_walk_descriptor(g: &SceneGraph, root: usize, steps: usize, walks: usize, seed: u64) -> Result<KernelVector> {
    let dim = g.node(root)?.distribution.len();
    let mut hist = vec![0.0; dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(root as u64);
    for _ in 0..walks {
        let mut cur = root;
        for _ in 0..steps {
            let nbrs = g.neighbors(cur)?;
            if nbrs.is_empty() {
                break;
            }
            cur = nbrs[rng.random_range(0..nbrs.len())].to;
            if cur != root {
                if let Ok(label) = mode_label(&g.nodes()[cur].distribution) {
                    hist[label.0] += 1.0;
                }
            }
        }
    }
    Ok(KernelVector::normalized(hist))
}

pub fn random_walk_descriptors(g: &SceneGraph, steps: usize, walks: usize, seed: u64) -> Vec<KernelVector> {
    (0..g.len())
        .map(|i| random_walk_descriptor(g, i, steps, walks, seed).expect("index in range"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DualQuadric;
    use crate::graph::{build_map_graph, EdgeWeighting};
    use crate::semantics::{CategoryDistribution, CategoryId, ObjectLandmark};
    use nalgebra::Vector3;

    fn obj(id: u64, p: [f64; 3], label: usize) -> ObjectLandmark {
        ObjectLandmark::with_distribution(
            id,
            DualQuadric::sphere(Vector3::from(p), 0.1).unwrap(),
            CategoryDistribution::one_hot(3, CategoryId(label), 1.0),
        )
    }

    #[test]
    fn isolated_root_is_zero() {
        let g = build_map_graph(&[obj(0, [0.0; 3], 0)], 5, EdgeWeighting::Distance);
        assert!(random_walk_descriptor(&g, 0, 5, 10, 1).unwrap().is_zero());
        assert!(random_walk_descriptor(&g, 3, 5, 10, 1).is_err());
    }

    #[test]
    fn star_of_chairs_is_one_hot() {
        // center is a table, leaves are chairs; K=1 makes each leaf pick the center
        let objs = [
            obj(0, [0.0, 0.0, 0.0], 1),
            obj(1, [1.0, 0.0, 0.0], 0),
            obj(2, [-1.0, 0.1, 0.0], 0),
            obj(3, [0.0, 1.2, 0.0], 0),
            obj(4, [0.0, -0.9, 0.3], 0),
        ];
        let g = build_map_graph(&objs, 1, EdgeWeighting::Distance);
        for seed in 0..5 {
            let d = random_walk_descriptor(&g, 0, 5, 8, seed).unwrap();
            assert_eq!(d.as_slice(), &[1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let objs: Vec<_> = (0..8).map(|i| obj(i, [i as f64, (i * i % 5) as f64, 0.0], (i % 3) as usize)).collect();
        let g = build_map_graph(&objs, 2, EdgeWeighting::Distance);
        assert_eq!(random_walk_descriptors(&g, 5, 10, 42), random_walk_descriptors(&g, 5, 10, 42));
    }
}
