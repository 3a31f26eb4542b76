//! File formats, the synthetic scene generator and the end-to-end pipeline.

pub mod formats;

pub use formats::{
    load_detections, load_intrinsics, load_map, load_trajectory, open_detections, save_detections, save_intrinsics,
    save_map, save_trajectory, DetectionReader, FileHeader, Frame,
};
pub mod synth;

pub use synth::{generate_synthetic, generate_with_objects, CameraPath, SynthConfig, SyntheticScene};
pub mod pipeline;

pub use pipeline::{FrameResult, Method, PipelineConfig, Relocalization, Relocalizer, StageTimings};
pub mod report;

pub use report::{evaluate_report, run_relocalization, EvaluationReport, Report, ReportInputs, TimingSummary};
