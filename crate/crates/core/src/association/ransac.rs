use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AssociationSet, CandidateSet, Match, RansacParams};
use crate::error::{Error, Result};
use crate::geometry::{project_center, CameraIntrinsics, PoseSE3};
use crate::graph::{Anchor, SceneGraph};
use crate::pose::{pnp_from_centers, Correspondence};

/// Winning hypothesis of [`ransac_relocalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct RansacOutcome {
    pub associations: AssociationSet,
    pub pose: PoseSE3,
    pub inliers: usize,
    /// Outer iteration that produced the winner.
    pub iteration: usize,
    /// Poses scored in total.
    pub hypotheses: usize,
}

fn pixel(g: &SceneGraph, i: usize) -> Result<Vector2<f64>> {
    match g.node(i)?.anchor {
        Anchor::Pixel(p) => Ok(p),
        Anchor::Metric(_) => Err(Error::InvariantViolation("frame graph node carries a metric anchor".into())),
    }
}

fn metric(g: &SceneGraph, i: usize) -> Result<Vector3<f64>> {
    match g.node(i)?.anchor {
        Anchor::Metric(p) => Ok(p),
        Anchor::Pixel(_) => Err(Error::InvariantViolation("map graph node carries a pixel anchor".into())),
    }
}

struct Scorer<'a> {
    frame_px: Vec<Vector2<f64>>,
    map_xyz: Vec<Vector3<f64>>,
    candidates: &'a CandidateSet,
    usable: &'a [usize],
    camera: &'a CameraIntrinsics,
    threshold: f64,
}

impl Scorer<'_> {
    fn pairs(&self, pose: &PoseSE3, below_threshold: bool, out: &mut Vec<(f64, usize, usize)>) {
        out.clear();
        for &f in self.usable {
            for c in self.candidates.for_node(f) {
                if let Ok(uv) = project_center(pose, self.camera, &self.map_xyz[c.node]) {
                    let err = (uv - self.frame_px[f]).norm();
                    if err.is_finite() && (!below_threshold || err < self.threshold) {
                        out.push((err, f, c.node));
                    }
                }
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    }

    /// Greedy injective assignment by ascending center reprojection error.
    /// Pairs are visited in ascending order, so the inlier count only
    /// depends on the pairs below the threshold; `count_inliers` exploits
    /// that and `update_match` builds the full match list.
    fn greedy(&self, pairs: &[(f64, usize, usize)], mut visit: impl FnMut(usize, usize, f64)) {
        let mut frame_done = vec![false; self.frame_px.len()];
        let mut map_done = vec![false; self.map_xyz.len()];
        for &(err, f, m) in pairs {
            if frame_done[f] || map_done[m] {
                continue;
            }
            frame_done[f] = true;
            map_done[m] = true;
            visit(f, m, err);
        }
    }

    fn count_inliers(&self, pose: &PoseSE3, buf: &mut Vec<(f64, usize, usize)>) -> usize {
        self.pairs(pose, true, buf);
        let mut n = 0;
        self.greedy(buf, |_, _, _| n += 1);
        n
    }

    fn update_match(&self, pose: &PoseSE3) -> Vec<Match> {
        let mut pairs = Vec::new();
        self.pairs(pose, false, &mut pairs);
        let mut out = Vec::new();
        self.greedy(&pairs, |f, m, err| {
            out.push(Match {
                detection: f,
                object: m,
                inlier: err < self.threshold,
                reprojection_error: err,
            })
        });
        out
    }
}

/// Visits every injective choice of one candidate per sampled frame node,
/// in lexicographic order.
fn for_each_combination(lists: &[&[super::Candidate]], mut admissible: impl FnMut(&[usize], usize, usize) -> bool, mut visit: impl FnMut(&[usize])) {
    let n = lists.len();
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    fn rec(
        depth: usize,
        lists: &[&[super::Candidate]],
        chosen: &mut Vec<usize>,
        admissible: &mut dyn FnMut(&[usize], usize, usize) -> bool,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if depth == lists.len() {
            visit(chosen);
            return;
        }
        for c in lists[depth] {
            if chosen.contains(&c.node) || !admissible(chosen, depth, c.node) {
                continue;
            }
            chosen.push(c.node);
            rec(depth + 1, lists, chosen, admissible, visit);
            chosen.pop();
        }
    }
    if n == 0 {
        return;
    }
    rec(0, lists, &mut chosen, &mut admissible, &mut visit);
}

/// Hypothesize-and-verify node matching.
///
/// Each outer iteration draws `num` frame nodes (from those with candidates)
/// using its own RNG stream, so iteration `i` sees the same sample whatever
/// `max_iter` is. Every injective, connectivity-respecting candidate
/// combination is solved with PnP on the centers and every resulting pose is
/// scored by greedy injective reprojection matching. The first hypothesis with
/// the highest inlier count wins.
pub fn ransac_relocalize(
    frame_graph: &SceneGraph,
    map_graph: &SceneGraph,
    candidates: &CandidateSet,
    camera: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<RansacOutcome> {
    params.validate()?;
    let usable: Vec<usize> = (0..frame_graph.len())
        .filter(|&i| !candidates.for_node(i).is_empty())
        .collect();
    if usable.len() < params.num {
        return Err(Error::InsufficientDetections {
            available: usable.len(),
            required: params.num,
        });
    }
    for list in candidates.iter() {
        if let Some(c) = list.iter().find(|c| c.node >= map_graph.len()) {
            return Err(Error::UnknownNode(c.node));
        }
    }
    let scorer = Scorer {
        frame_px: (0..frame_graph.len()).map(|i| pixel(frame_graph, i)).collect::<Result<_>>()?,
        map_xyz: (0..map_graph.len()).map(|i| metric(map_graph, i)).collect::<Result<_>>()?,
        candidates,
        usable: &usable,
        camera,
        threshold: params.inlier_threshold,
    };

    let mut reach: HashMap<usize, Vec<bool>> = HashMap::new();
    let mut best: Option<RansacOutcome> = None;
    let mut hypotheses = 0usize;
    let mut buf = Vec::new();

    'outer: for iter in 0..params.max_iter {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(iter as u64);
        let picked: Vec<usize> = sample(&mut rng, usable.len(), params.num)
            .into_iter()
            .map(|i| usable[i])
            .collect();
        let lists: Vec<_> = picked.iter().map(|&f| candidates.for_node(f)).collect();

        // frame adjacency among the sampled nodes
        let adjacent: Vec<Vec<bool>> = picked
            .iter()
            .map(|&a| picked.iter().map(|&b| a != b && frame_graph.weight(a, b).is_some()).collect())
            .collect();

        let mut combos: Vec<Vec<usize>> = Vec::new();
        for_each_combination(
            &lists,
            |chosen, depth, node| match params.connectivity_hops {
                None => true,
                Some(h) => chosen.iter().enumerate().all(|(d, &prev)| {
                    !adjacent[depth][d]
                        || reach
                            .entry(prev)
                            .or_insert_with(|| map_graph.within_hops(prev, h))[node]
                }),
            },
            |chosen| combos.push(chosen.to_vec()),
        );

        for combo in combos {
            let corrs: Vec<Correspondence> = picked
                .iter()
                .zip(&combo)
                .map(|(&f, &m)| Correspondence::new(scorer.frame_px[f], scorer.map_xyz[m]))
                .collect();
            let Ok(poses) = pnp_from_centers(&corrs, camera) else {
                continue;
            };
            for pose in poses {
                hypotheses += 1;
                let inliers = scorer.count_inliers(&pose, &mut buf);
                if best.as_ref().is_none_or(|b| inliers > b.inliers) {
                    best = Some(RansacOutcome {
                        associations: AssociationSet::new(scorer.update_match(&pose))?,
                        pose,
                        inliers,
                        iteration: iter,
                        hypotheses: 0,
                    });
                    // nothing later can beat a full house, and ties keep the first
                    if inliers == usable.len() {
                        break 'outer;
                    }
                }
            }
        }
    }

    match best {
        Some(mut b) if b.inliers > 0 => {
            b.hypotheses = hypotheses;
            Ok(b)
        }
        _ => Err(Error::NoValidPose),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::Candidate;
    use crate::geometry::{project_quadric, DualQuadric};
    use crate::graph::{build_frame_graph, build_map_graph, EdgeWeighting};
    use crate::semantics::{CategoryDistribution, CategoryId, CategorySet, Detection, ObjectLandmark};

    struct Scene {
        frame: SceneGraph,
        map: SceneGraph,
        camera: CameraIntrinsics,
        /// detection index -> object index
        truth: Vec<usize>,
    }

    fn scene() -> Scene {
        let camera = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        let pose = PoseSE3::look_at(&Vector3::new(0.3, -5.0, 1.5), &Vector3::new(0.0, 0.0, 0.4), &Vector3::z()).unwrap();
        let cats = CategorySet::new((0..4).map(|i| format!("c{i}"))).unwrap();
        let mut objects = Vec::new();
        for i in 0..10 {
            let a = i as f64 * 0.7;
            let p = Vector3::new(1.6 * a.cos(), 1.2 * a.sin(), 0.2 + 0.1 * (i % 3) as f64);
            let q = DualQuadric::sphere(p, 0.15 + 0.02 * i as f64).unwrap();
            objects.push(ObjectLandmark::with_distribution(
                i as u64,
                q,
                CategoryDistribution::one_hot(4, CategoryId(i % 4), 1.0),
            ));
        }
        // detections listed in reverse so indices differ from object ids
        let mut dets = Vec::new();
        let mut truth = Vec::new();
        for (i, o) in objects.iter().enumerate().rev() {
            let bbox = project_quadric(&o.quadric, &pose, &camera).unwrap().bounding_box().clamp_to(640.0, 480.0).unwrap();
            dets.push(Detection::new(bbox, CategoryId(i % 4), 0.9).unwrap());
            truth.push(i);
        }
        Scene {
            frame: build_frame_graph(&dets, &cats, 5, EdgeWeighting::Distance).unwrap(),
            map: build_map_graph(&objects, 5, EdgeWeighting::Distance),
            camera,
            truth,
        }
    }

    /// All same-label objects, true one first only for even detections.
    fn candidates(s: &Scene) -> CandidateSet {
        CandidateSet::new(
            s.truth
                .iter()
                .enumerate()
                .map(|(d, &t)| {
                    let mut list: Vec<usize> = (0..10).filter(|o| o % 4 == t % 4).collect();
                    if d % 2 == 0 {
                        list.retain(|&o| o != t);
                        list.insert(0, t);
                    }
                    list.into_iter().map(|node| Candidate { node, distance: 0.0 }).collect()
                })
                .collect(),
        )
    }

    #[test]
    fn recovers_ground_truth() {
        let s = scene();
        let out = ransac_relocalize(&s.frame, &s.map, &candidates(&s), &s.camera, &RansacParams::default()).unwrap();
        assert_eq!(out.inliers, 10);
        for (d, &t) in s.truth.iter().enumerate() {
            assert_eq!(out.associations.object_for(d), Some(t), "detection {d}");
        }
    }

    #[test]
    fn deterministic_and_monotone() {
        let s = scene();
        let cands = candidates(&s);
        let params = RansacParams { seed: 11, max_iter: 12, ..Default::default() };
        let a = ransac_relocalize(&s.frame, &s.map, &cands, &s.camera, &params).unwrap();
        let b = ransac_relocalize(&s.frame, &s.map, &cands, &s.camera, &params).unwrap();
        assert_eq!(a, b);

        // a narrow threshold keeps the count from saturating immediately
        let mut last = 0;
        for max_iter in 1..15 {
            let p = RansacParams { seed: 3, max_iter, inlier_threshold: 2.0, ..Default::default() };
            if let Ok(out) = ransac_relocalize(&s.frame, &s.map, &cands, &s.camera, &p) {
                assert!(out.inliers >= last);
                last = out.inliers;
                let mut objs: Vec<_> = out.associations.inliers().map(|m| m.object).collect();
                let n = objs.len();
                objs.sort_unstable();
                objs.dedup();
                assert_eq!(objs.len(), n);
            } else {
                assert_eq!(last, 0);
            }
        }
    }

    #[test]
    fn too_few_usable_detections() {
        let s = scene();
        let mut lists: Vec<Vec<Candidate>> = vec![Vec::new(); 10];
        lists[0] = vec![Candidate { node: 9, distance: 0.0 }];
        lists[1] = vec![Candidate { node: 8, distance: 0.0 }];
        let r = ransac_relocalize(&s.frame, &s.map, &CandidateSet::new(lists), &s.camera, &RansacParams::default());
        assert!(matches!(r, Err(Error::InsufficientDetections { available: 2, required: 3 })));
    }

    #[test]
    fn connectivity_can_be_disabled() {
        let s = scene();
        let params = RansacParams { connectivity_hops: None, ..Default::default() };
        let out = ransac_relocalize(&s.frame, &s.map, &candidates(&s), &s.camera, &params).unwrap();
        assert_eq!(out.inliers, 10);
    }
}
