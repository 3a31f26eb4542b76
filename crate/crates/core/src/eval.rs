//! Association and pose-accuracy metrics.

use serde::{Deserialize, Serialize};

use crate::association::AssociationSet;
use crate::error::{Error, Result};
use crate::geometry::{project_quadric, BoundingBox, CameraIntrinsics, Ellipse2D, PoseSE3};
use crate::semantics::{Detection, ObjectLandmark};

/// Minimum box IoU for a detection to be attributed to a projected object.
pub const GT_IOU_FLOOR: f64 = 0.1;
/// Largest timestamp gap, in seconds, accepted when looking up ground truth.
pub const MAX_TIMESTAMP_GAP: f64 = 0.05;

fn projected(obj: &ObjectLandmark, pose: &PoseSE3, camera: &CameraIntrinsics) -> Option<(Ellipse2D, BoundingBox)> {
    let e = project_quadric(&obj.quadric, pose, camera).ok()?;
    let b = e.bounding_box().clamp_to(camera.width(), camera.height()).ok()?;
    Some((e, b))
}

/// Attributes detections to map objects by projecting every object under the
/// true pose and greedily pairing by descending box IoU (above
/// [`GT_IOU_FLOOR`]), one object per detection and vice versa.
pub fn ground_truth_associations(
    dets: &[Detection],
    map: &[ObjectLandmark],
    gt_pose: &PoseSE3,
    camera: &CameraIntrinsics,
) -> AssociationSet {
    let boxes: Vec<Option<BoundingBox>> = map.iter().map(|o| projected(o, gt_pose, camera).map(|p| p.1)).collect();
    let mut pairs = Vec::new();
    for (d, det) in dets.iter().enumerate() {
        for (o, b) in boxes.iter().enumerate() {
            if let Some(b) = b {
                let iou = det.bbox.iou(b);
                if iou > GT_IOU_FLOOR {
                    pairs.push((iou, d, o));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; dets.len()];
    let mut obj_used = vec![false; map.len()];
    let mut chosen = Vec::new();
    for (_, d, o) in pairs {
        if !det_used[d] && !obj_used[o] {
            det_used[d] = true;
            obj_used[o] = true;
            chosen.push((d, o));
        }
    }
    AssociationSet::from_pairs(chosen).expect("greedy assignment is injective")
}

/// Association quality of one frame or a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationMetrics {
    /// Percentage of predicted matches that agree with ground truth.
    pub accuracy: f64,
    /// Mean pixel distance between detection box center and the matched
    /// object's projected center under the true pose.
    pub center_distance: f64,
    /// Mean IoU between detection box and the matched object's projected box.
    pub iou: f64,
    pub correct: usize,
    pub predicted: usize,
    pub ground_truth: usize,
    /// No predicted matches: accuracy is undefined and reported as 0.
    pub empty_prediction: bool,
}

/// Running sums behind [`AssociationMetrics`]; frames are pooled match by match.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AssociationTally {
    pub correct: usize,
    pub predicted: usize,
    pub ground_truth: usize,
    center_sum: f64,
    iou_sum: f64,
    measured: usize,
}

impl AssociationTally {
    /// Scores the inlier matches of `pred` against `gt` for one frame.
    pub fn frame(
        pred: &AssociationSet,
        gt: &AssociationSet,
        dets: &[Detection],
        map: &[ObjectLandmark],
        gt_pose: &PoseSE3,
        camera: &CameraIntrinsics,
    ) -> Self {
        let mut t = Self {
            ground_truth: gt.inlier_count(),
            ..Self::default()
        };
        for m in pred.inliers() {
            t.predicted += 1;
            if gt.object_for(m.detection) == Some(m.object) {
                t.correct += 1;
            }
            let (Some(det), Some(obj)) = (dets.get(m.detection), map.get(m.object)) else {
                continue;
            };
            if let Some((e, b)) = projected(obj, gt_pose, camera) {
                t.center_sum += (det.bbox.center() - e.center()).norm();
                t.iou_sum += det.bbox.iou(&b);
                t.measured += 1;
            }
        }
        t
    }

    pub fn merge(&mut self, other: &Self) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.ground_truth += other.ground_truth;
        self.center_sum += other.center_sum;
        self.iou_sum += other.iou_sum;
        self.measured += other.measured;
    }

    pub fn metrics(&self) -> AssociationMetrics {
        let mean = |s: f64| if self.measured == 0 { 0.0 } else { s / self.measured as f64 };
        AssociationMetrics {
            accuracy: if self.predicted == 0 {
                0.0
            } else {
                100.0 * self.correct as f64 / self.predicted as f64
            },
            center_distance: mean(self.center_sum),
            iou: mean(self.iou_sum),
            correct: self.correct,
            predicted: self.predicted,
            ground_truth: self.ground_truth,
            empty_prediction: self.predicted == 0,
        }
    }
}

pub fn association_metrics(
    pred: &AssociationSet,
    gt: &AssociationSet,
    dets: &[Detection],
    map: &[ObjectLandmark],
    gt_pose: &PoseSE3,
    camera: &CameraIntrinsics,
) -> AssociationMetrics {
    AssociationTally::frame(pred, gt, dets, map, gt_pose, camera).metrics()
}

/// Timestamped map-to-camera poses, sorted by time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<PoseSE3>,
}

impl Trajectory {
    pub fn new(mut entries: Vec<(f64, PoseSE3)>) -> Self {
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (stamps, poses) = entries.into_iter().unzip();
        Self { stamps, poses }
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &PoseSE3)> {
        self.stamps.iter().copied().zip(&self.poses)
    }

    /// Pose closest in time to `timestamp`, if within `max_gap` seconds.
    pub fn nearest(&self, timestamp: f64, max_gap: f64) -> Option<&PoseSE3> {
        let i = self.stamps.partition_point(|&s| s < timestamp);
        [i.checked_sub(1), (i < self.len()).then_some(i)]
            .into_iter()
            .flatten()
            .map(|j| ((self.stamps[j] - timestamp).abs(), j))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .filter(|(gap, _)| *gap <= max_gap)
            .map(|(_, j)| &self.poses[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRate {
    pub threshold_m: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranslationPercentile {
    pub fraction: f64,
    /// `None` when no frame was relocalized.
    pub mean_te_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub frames: usize,
    pub failures: usize,
    pub success_rate: Vec<SuccessRate>,
    pub te_percentile: Vec<TranslationPercentile>,
}

/// Translation error between camera centers for each relocalized frame,
/// `None` for failures.
pub fn translation_errors(estimates: &[(f64, Option<PoseSE3>)], gt: &Trajectory) -> Result<Vec<Option<f64>>> {
    estimates
        .iter()
        .map(|(stamp, est)| match est {
            None => Ok(None),
            Some(p) => gt
                .nearest(*stamp, MAX_TIMESTAMP_GAP)
                .map(|g| Some(p.translation_error_to(g)))
                .ok_or(Error::NoGroundTruth { timestamp: *stamp }),
        })
        .collect()
}

/// Success rate (TE strictly below each threshold, failures counted as
/// misses) and mean TE over the best `⌈f·N⌉` relocalized frames for each
/// fraction `f`.
pub fn pose_metrics(
    estimates: &[(f64, Option<PoseSE3>)],
    gt: &Trajectory,
    thresholds: &[f64],
    fractions: &[f64],
) -> Result<PoseMetrics> {
    let errors = translation_errors(estimates, gt)?;
    Ok(pose_metrics_from_errors(&errors, thresholds, fractions))
}

pub fn pose_metrics_from_errors(errors: &[Option<f64>], thresholds: &[f64], fractions: &[f64]) -> PoseMetrics {
    let mut ok: Vec<f64> = errors.iter().flatten().copied().collect();
    ok.sort_by(f64::total_cmp);
    let frames = errors.len();
    let success_rate = thresholds
        .iter()
        .map(|&a| SuccessRate {
            threshold_m: a,
            percent: if frames == 0 {
                0.0
            } else {
                100.0 * ok.iter().filter(|&&e| e < a).count() as f64 / frames as f64
            },
        })
        .collect();
    let te_percentile = fractions
        .iter()
        .map(|&f| TranslationPercentile {
            fraction: f,
            mean_te_m: (!ok.is_empty()).then(|| {
                let n = ((f * ok.len() as f64 - 1e-9).ceil() as usize).clamp(1, ok.len());
                ok[..n].iter().sum::<f64>() / n as f64
            }),
        })
        .collect();
    PoseMetrics {
        frames,
        failures: frames - ok.len(),
        success_rate,
        te_percentile,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::DualQuadric;
    use crate::semantics::{CategoryDistribution, CategoryId};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn setup() -> (Vec<ObjectLandmark>, Vec<Detection>, PoseSE3, CameraIntrinsics) {
        let camera = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).unwrap();
        let pose = PoseSE3::identity();
        let map: Vec<_> = [[-1.0, 0.0, 5.0], [1.0, 0.2, 5.0], [0.0, -0.8, 4.0]]
            .iter()
            .enumerate()
            .map(|(i, p)| {
                ObjectLandmark::with_distribution(
                    i as u64,
                    DualQuadric::sphere(Vector3::from(*p), 0.3).unwrap(),
                    CategoryDistribution::one_hot(2, CategoryId(0), 1.0),
                )
            })
            .collect();
        let dets = map
            .iter()
            .map(|o| {
                let b = project_quadric(&o.quadric, &pose, &camera).unwrap().bounding_box();
                Detection::new(b, CategoryId(0), 0.9).unwrap()
            })
            .collect();
        (map, dets, pose, camera)
    }

    #[test]
    fn exact_boxes_match_with_unit_iou() {
        let (map, dets, pose, camera) = setup();
        let gt = ground_truth_associations(&dets, &map, &pose, &camera);
        assert_eq!(gt.inlier_count(), 3);
        let m = association_metrics(&gt, &gt, &dets, &map, &pose, &camera);
        assert_eq!(m.accuracy, 100.0);
        assert!(m.center_distance < 1e-9);
        assert!((m.iou - 1.0).abs() < 1e-12);
        assert!(!m.empty_prediction);
    }

    #[test]
    fn floor_and_injectivity() {
        let (map, mut dets, pose, camera) = setup();
        dets.push(Detection::new(BoundingBox::new(0.0, 0.0, 5.0, 5.0).unwrap(), CategoryId(0), 0.5).unwrap());
        // a slightly shifted duplicate of detection 0
        let b = dets[0].bbox;
        dets.push(Detection::new(BoundingBox::new(b.x_min + 3.0, b.y_min, b.x_max + 3.0, b.y_max).unwrap(), CategoryId(0), 0.9).unwrap());
        let gt = ground_truth_associations(&dets, &map, &pose, &camera);
        assert_eq!(gt.object_for(3), None);
        assert_eq!(gt.object_for(0), Some(0));
        assert_eq!(gt.object_for(4), None);
    }

    #[test]
    fn wrong_and_empty_predictions() {
        let (map, dets, pose, camera) = setup();
        let gt = ground_truth_associations(&dets, &map, &pose, &camera);
        let wrong = AssociationSet::from_pairs([(0, 1), (1, 2), (2, 0)]).unwrap();
        assert_eq!(association_metrics(&wrong, &gt, &dets, &map, &pose, &camera).accuracy, 0.0);
        let empty = association_metrics(&AssociationSet::default(), &gt, &dets, &map, &pose, &camera);
        assert!(empty.empty_prediction);
        assert_eq!(empty.accuracy, 0.0);
        // half right
        let half = AssociationSet::from_pairs([(0, 0), (1, 2)]).unwrap();
        assert_eq!(association_metrics(&half, &gt, &dets, &map, &pose, &camera).accuracy, 50.0);
    }

    #[test]
    fn pose_metric_examples() {
        let gt = Trajectory::new((0..10).map(|i| (i as f64 * 0.1, PoseSE3::identity())).collect());
        let exact: Vec<_> = (0..10).map(|i| (i as f64 * 0.1 + 0.01, Some(PoseSE3::identity()))).collect();
        let m = pose_metrics(&exact, &gt, &[0.5, 2.0], &[0.1, 0.2]).unwrap();
        assert!(m.success_rate.iter().all(|s| s.percent == 100.0));
        assert!(m.te_percentile.iter().all(|p| p.mean_te_m == Some(0.0)));

        let failed: Vec<_> = (0..10).map(|i| (i as f64 * 0.1, None)).collect();
        let m = pose_metrics(&failed, &gt, &[2.0], &[0.1]).unwrap();
        assert_eq!(m.success_rate[0].percent, 0.0);
        assert_eq!(m.te_percentile[0].mean_te_m, None);
        assert_eq!(m.failures, 10);

        let far = [(5.0, Some(PoseSE3::identity()))];
        assert!(matches!(pose_metrics(&far, &gt, &[1.0], &[0.1]), Err(Error::NoGroundTruth { .. })));
    }

    #[test]
    fn percentiles_by_hand() {
        // TE 0.1..1.0 over ten frames plus two failures
        let mut errs: Vec<Option<f64>> = (1..=10).map(|i| Some(i as f64 / 10.0)).collect();
        errs.extend([None, None]);
        let m = pose_metrics_from_errors(&errs, &[0.35, 5.0], &[0.1, 0.2, 0.25]);
        assert_eq!(m.success_rate[0].percent, 100.0 * 3.0 / 12.0);
        assert_eq!(m.success_rate[1].percent, 100.0 * 10.0 / 12.0);
        assert!((m.te_percentile[0].mean_te_m.unwrap() - 0.1).abs() < 1e-15);
        assert!((m.te_percentile[1].mean_te_m.unwrap() - 0.15).abs() < 1e-15);
        // ⌈2.5⌉ = 3 frames
        assert!((m.te_percentile[2].mean_te_m.unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn nearest_lookup() {
        let t = Trajectory::new(vec![(1.0, PoseSE3::identity()), (0.0, PoseSE3::from_translation(Vector3::x()))]);
        assert_eq!(t.nearest(0.04, 0.05).unwrap().translation().x, 1.0);
        assert_eq!(t.nearest(0.97, 0.05).unwrap().translation().x, 0.0);
        assert!(t.nearest(0.5, 0.05).is_none());
    }

    proptest! {
        #[test]
        fn monotone_and_order_free(
            errs in prop::collection::vec(prop::option::weighted(0.8, 0.0..10.0f64), 1..40),
            a in 0.0..10.0f64, b in 0.0..10.0f64,
            f in 0.01..1.0f64, g in 0.01..1.0f64,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (fl, fh) = if f <= g { (f, g) } else { (g, f) };
            let m = pose_metrics_from_errors(&errs, &[lo, hi], &[fl, fh]);
            prop_assert!(m.success_rate[0].percent <= m.success_rate[1].percent);
            if let (Some(x), Some(y)) = (m.te_percentile[0].mean_te_m, m.te_percentile[1].mean_te_m) {
                prop_assert!(x <= y + 1e-12);
            }
            let mut rev = errs.clone();
            rev.reverse();
            let r = pose_metrics_from_errors(&rev, &[lo, hi], &[fl, fh]);
            prop_assert_eq!(m.success_rate, r.success_rate);
            prop_assert_eq!(m.failures, r.failures);
        }
    }
}
