//! Relocalization reports and their evaluation against ground truth.
//!
//! Reports deliberately carry no wall-clock data so that identical inputs
//! give byte-identical files; timings are summarized separately.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::formats::{FileHeader, Frame};
use super::pipeline::{Method, Relocalizer, StageTimings};
use crate::association::{AssociationSet, Match};
use crate::error::{Error, Result};
use crate::eval::{
    ground_truth_associations, pose_metrics_from_errors, AssociationMetrics, AssociationTally, PoseMetrics, Trajectory,
    MAX_TIMESTAMP_GAP,
};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::semantics::ObjectLandmark;

pub const REPORT_FORMAT: &str = "goreloc-report";
pub const METRICS_FORMAT: &str = "goreloc-metrics";

/// Map-to-camera pose as stored in reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub translation: [f64; 3],
    /// (w, x, y, z)
    pub rotation: [f64; 4],
}

impl From<&PoseSE3> for PoseRecord {
    fn from(p: &PoseSE3) -> Self {
        let q = p.quaternion();
        Self {
            translation: (*p.translation()).into(),
            rotation: [q.w, q.i, q.j, q.k],
        }
    }
}

impl PoseRecord {
    pub fn to_pose(&self) -> PoseSE3 {
        let [w, x, y, z] = self.rotation;
        PoseSE3::from_quaternion(
            &UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z)),
            Vector3::from(self.translation),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    /// Index into the frame's detections as read from the detections file.
    pub detection: usize,
    /// Map object id.
    pub object: u64,
    pub inlier: bool,
    pub reprojection_error_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub frame_id: u64,
    pub timestamp: f64,
    pub detections: usize,
    /// Detections left after score/overlap filtering.
    pub kept: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<PoseRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_pose: Option<PoseRecord>,
    #[serde(default)]
    pub inliers: usize,
    #[serde(default)]
    pub matches: Vec<MatchRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<RefinementRecord>,
}

impl FrameReport {
    pub fn succeeded(&self) -> bool {
        self.pose.is_some()
    }
}

/// Input files the report was produced from, so it can be evaluated later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportInputs {
    pub map: String,
    pub detections: String,
    /// `fx,fy,cx,cy,width,height`
    pub intrinsics: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub method: Method,
    pub k: usize,
    pub j: usize,
    pub num: usize,
    pub max_iter: usize,
    pub inlier_px: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub frames: usize,
    pub relocalized: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub header: FileHeader,
    pub inputs: ReportInputs,
    pub settings: ReportSettings,
    pub frames: Vec<FrameReport>,
    pub summary: ReportSummary,
}

impl Report {
    pub fn failure_fraction(&self) -> f64 {
        if self.summary.frames == 0 {
            0.0
        } else {
            self.summary.failed as f64 / self.summary.frames as f64
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Report = serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
        if r.header.format != REPORT_FORMAT {
            return Err(Error::parse(path, 1, format!("expected format `{REPORT_FORMAT}`")));
        }
        Ok(r)
    }
}

/// Accumulated per-stage wall-clock time over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TimingSummary {
    pub frames: usize,
    pub total: StageTimings,
    pub slowest_frame: Duration,
}

impl TimingSummary {
    pub fn add(&mut self, t: &StageTimings) {
        self.frames += 1;
        self.total.add(t);
        self.slowest_frame = self.slowest_frame.max(t.total());
    }

    fn mean_ms(&self, d: Duration) -> f64 {
        if self.frames == 0 {
            0.0
        } else {
            d.as_secs_f64() * 1e3 / self.frames as f64
        }
    }

    pub fn mean_frame_ms(&self) -> f64 {
        self.mean_ms(self.total.total())
    }

    fn rows(&self) -> [(&'static str, f64); 5] {
        [
            ("frame_processing", self.mean_ms(self.total.frame_processing)),
            ("graph_generation", self.mean_ms(self.total.graph_generation)),
            ("subgraph_extraction", self.mean_ms(self.total.subgraph_extraction)),
            ("refinement", self.mean_ms(self.total.refinement)),
            ("total", self.mean_frame_ms()),
        ]
    }

    /// Aligned table of mean milliseconds per frame.
    pub fn render(&self) -> String {
        let mut s = format!("{:<22}{:>12}\n", "stage", "mean ms");
        for (name, ms) in self.rows() {
            let _ = writeln!(s, "{name:<22}{ms:>12.3}");
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut m = serde_json::Map::new();
        m.insert("frames".into(), self.frames.into());
        let stages: serde_json::Map<_, _> = self.rows().iter().map(|(k, v)| (k.to_string(), (*v).into())).collect();
        m.insert("mean_ms".into(), stages.into());
        m.insert("slowest_frame_ms".into(), (self.slowest_frame.as_secs_f64() * 1e3).into());
        serde_json::to_string_pretty(&m).expect("timings serialize") + "\n"
    }
}

/// Relocalizes every frame of the stream in order.
pub fn run_relocalization(
    reloc: &Relocalizer,
    frames: impl IntoIterator<Item = Result<Frame>>,
    inputs: ReportInputs,
) -> Result<(Report, TimingSummary)> {
    let cfg = reloc.config();
    let mut timings = TimingSummary::default();
    let mut records = Vec::new();
    for frame in frames {
        let frame = frame?;
        let res = reloc.relocalize(&frame.detections);
        timings.add(&res.timings);
        let mut rec = FrameReport {
            frame_id: frame.frame_id,
            timestamp: frame.timestamp,
            detections: frame.detections.len(),
            kept: res.kept_detections,
            error: None,
            pose: None,
            initial_pose: None,
            inliers: 0,
            matches: Vec::new(),
            refinement: None,
        };
        match res.outcome {
            Ok(r) => {
                rec.pose = Some((&r.pose).into());
                rec.initial_pose = Some((&r.initial_pose).into());
                rec.inliers = r.inliers;
                rec.matches = r
                    .associations
                    .matches()
                    .iter()
                    .map(|m| MatchRecord {
                        detection: m.detection,
                        object: reloc.objects()[m.object].id,
                        inlier: m.inlier,
                        reprojection_error_px: m.reprojection_error,
                    })
                    .collect();
                rec.refinement = r.refinement.map(|o| RefinementRecord {
                    initial_cost: o.initial_cost,
                    final_cost: o.final_cost,
                    iterations: o.iterations,
                    dropped: o.dropped,
                });
            }
            Err(e) => rec.error = Some(e.to_string()),
        }
        records.push(rec);
    }
    let relocalized = records.iter().filter(|r| r.succeeded()).count();
    let report = Report {
        header: FileHeader::new(REPORT_FORMAT, &[("translation", "m"), ("reprojection_error", "px")]),
        inputs,
        settings: ReportSettings {
            method: cfg.method,
            k: cfg.k,
            j: cfg.j,
            num: cfg.ransac.num,
            max_iter: cfg.ransac.max_iter,
            inlier_px: cfg.ransac.inlier_threshold,
            seed: cfg.ransac.seed,
        },
        summary: ReportSummary {
            frames: records.len(),
            relocalized,
            failed: records.len() - relocalized,
        },
        frames: records,
    };
    Ok((report, timings))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub header: FileHeader,
    pub association: AssociationMetrics,
    pub pose: PoseMetrics,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize") + "\n"
    }

    /// Aligned human-readable summary.
    pub fn render_table(&self) -> String {
        let a = &self.association;
        let mut s = String::new();
        let _ = writeln!(s, "{:<28}{:>12}", "metric", "value");
        let _ = writeln!(s, "{:<28}{:>12.2}", "accuracy (%)", a.accuracy);
        let _ = writeln!(s, "{:<28}{:>12.2}", "center distance (px)", a.center_distance);
        let _ = writeln!(s, "{:<28}{:>12.3}", "IoU", a.iou);
        let _ = writeln!(s, "{:<28}{:>12}", "matches correct/predicted", format!("{}/{}", a.correct, a.predicted));
        let _ = writeln!(s, "{:<28}{:>12}", "frames", self.pose.frames);
        let _ = writeln!(s, "{:<28}{:>12}", "failures", self.pose.failures);
        for r in &self.pose.success_rate {
            let _ = writeln!(s, "{:<28}{:>12.2}", format!("success @{}m (%)", r.threshold_m), r.percent);
        }
        for p in &self.pose.te_percentile {
            let v = p.mean_te_m.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(s, "{:<28}{:>12}", format!("TE best {}% (m)", p.fraction * 100.0), v);
        }
        s
    }
}

/// Scores a report: association metrics against projection-derived ground
/// truth and translation metrics against the trajectory.
pub fn evaluate_report(
    report: &Report,
    objects: &[ObjectLandmark],
    frames: &[Frame],
    camera: &CameraIntrinsics,
    gt: &Trajectory,
    thresholds: &[f64],
    fractions: &[f64],
) -> Result<EvaluationReport> {
    let by_id: HashMap<u64, usize> = objects.iter().enumerate().map(|(i, o)| (o.id, i)).collect();
    let frame_by_id: HashMap<u64, &Frame> = frames.iter().map(|f| (f.frame_id, f)).collect();
    let mut tally = AssociationTally::default();
    let mut errors = Vec::with_capacity(report.frames.len());
    for rec in &report.frames {
        let gt_pose = gt.nearest(rec.timestamp, MAX_TIMESTAMP_GAP);
        let Some(pose) = &rec.pose else {
            errors.push(None);
            if let (Some(g), Some(f)) = (gt_pose, frame_by_id.get(&rec.frame_id)) {
                let gt_assoc = ground_truth_associations(&f.detections, objects, g, camera);
                tally.merge(&AssociationTally::frame(&AssociationSet::default(), &gt_assoc, &f.detections, objects, g, camera));
            }
            continue;
        };
        let g = gt_pose.ok_or(Error::NoGroundTruth { timestamp: rec.timestamp })?;
        errors.push(Some(pose.to_pose().translation_error_to(g)));
        let f = frame_by_id
            .get(&rec.frame_id)
            .ok_or_else(|| Error::InvariantViolation(format!("frame {} missing from detections", rec.frame_id)))?;
        let pred = AssociationSet::new(
            rec.matches
                .iter()
                .map(|m| {
                    Ok(Match {
                        detection: m.detection,
                        object: *by_id.get(&m.object).ok_or(Error::UnknownNode(m.object as usize))?,
                        inlier: m.inlier,
                        reprojection_error: m.reprojection_error_px,
                    })
                })
                .collect::<Result<_>>()?,
        )?;
        let gt_assoc = ground_truth_associations(&f.detections, objects, g, camera);
        tally.merge(&AssociationTally::frame(&pred, &gt_assoc, &f.detections, objects, g, camera));
    }
    Ok(EvaluationReport {
        header: FileHeader::new(METRICS_FORMAT, &[("center_distance", "px"), ("te", "m"), ("accuracy", "%")]),
        association: tally.metrics(),
        pose: pose_metrics_from_errors(&errors, thresholds, fractions),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::pipeline::PipelineConfig;
    use crate::harness::synth::{generate_synthetic, SynthConfig};

    fn run(seed: u64) -> (Report, crate::harness::synth::SyntheticScene) {
        let cfg = SynthConfig { objects: 12, categories: 6, frames: 5, seed: 4, ..Default::default() };
        let scene = generate_synthetic(&cfg).unwrap();
        let mut pc = PipelineConfig::default();
        pc.ransac.seed = seed;
        let reloc = Relocalizer::new(scene.categories.clone(), scene.objects.clone(), scene.camera, pc).unwrap();
        let inputs = ReportInputs {
            map: "map.json".into(),
            detections: "detections.jsonl".into(),
            intrinsics: scene.camera.to_string(),
        };
        let (report, timings) = run_relocalization(&reloc, scene.frames.iter().cloned().map(Ok), inputs).unwrap();
        assert_eq!(timings.frames, 5);
        (report, scene)
    }

    #[test]
    fn report_round_trip_and_determinism() {
        let (a, _) = run(1);
        let (b, _) = run(1);
        assert_eq!(a.to_json(), b.to_json());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        a.save(&path).unwrap();
        assert_eq!(Report::load(&path).unwrap(), a);
        assert_eq!(a.summary.frames, 5);
    }

    #[test]
    fn evaluation_of_noiseless_run() {
        let (report, scene) = run(0);
        let m = evaluate_report(&report, &scene.objects, &scene.frames, &scene.camera, &scene.trajectory, &[0.01, 2.0], &[0.1, 0.2]).unwrap();
        assert_eq!(m.association.accuracy, 100.0);
        assert!(m.pose.success_rate[1].percent >= 80.0);
        assert!(m.render_table().contains("accuracy (%)"));
        let missing = Trajectory::default();
        assert!(matches!(
            evaluate_report(&report, &scene.objects, &scene.frames, &scene.camera, &missing, &[1.0], &[0.1]),
            Err(Error::NoGroundTruth { .. })
        ));
    }

    #[test]
    fn pose_record_round_trip() {
        let p = PoseSE3::look_at(&Vector3::new(1.0, 2.0, 3.0), &Vector3::zeros(), &Vector3::z()).unwrap();
        let q = PoseRecord::from(&p).to_pose();
        assert!((q.rotation() - p.rotation()).norm() < 1e-12);
        assert!((q.translation() - p.translation()).norm() < 1e-12);
    }
}
