//! Seeded synthetic scenes: a quadric map, rendered detections and the
//! ground-truth trajectory.

use std::path::Path;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::formats::{save_detections, save_intrinsics, save_map, save_trajectory, Frame};
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::geometry::{project_center, project_quadric, BoundingBox, CameraIntrinsics, DualQuadric, PoseSE3};
use crate::semantics::{CategoryId, CategorySet, Detection, ObjectLandmark, Observation};

const CATEGORY_NAMES: [&str; 20] = [
    "chair", "table", "monitor", "keyboard", "book", "cup", "bottle", "plant", "sofa", "tv", "laptop", "vase",
    "clock", "bed", "sink", "oven", "bench", "lamp", "bowl", "mouse",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraPath {
    /// Evenly spaced views on a circle around the scene.
    #[default]
    Orbit,
    /// Random headings, distances and heights around the scene.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub objects: usize,
    pub categories: usize,
    /// Box the object centroids are drawn from, meters; z starts at the floor.
    pub extent: [f64; 3],
    /// Smallest and largest semi-axis, meters.
    pub semi_axis_range: [f64; 2],
    pub frames: usize,
    pub camera_path: CameraPath,
    /// Standard deviation of the box-center noise, pixels.
    pub sigma_center: f64,
    /// Standard deviation of the relative box-size noise.
    pub sigma_size: f64,
    /// Probability that a detection reports a wrong label.
    pub label_flip: f64,
    /// Keyframe sightings recorded per map object.
    pub observations_per_object: usize,
    /// Seconds between frames.
    pub frame_interval: f64,
    pub camera: CameraIntrinsics,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            objects: 30,
            categories: 10,
            extent: [6.0, 6.0, 1.5],
            semi_axis_range: [0.15, 0.5],
            frames: 50,
            camera_path: CameraPath::Orbit,
            sigma_center: 0.0,
            sigma_size: 0.0,
            label_flip: 0.0,
            observations_per_object: 4,
            frame_interval: 0.1,
            camera: CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640.0, 480.0).expect("valid default"),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvariantViolation(format!("synthetic config: {m}")));
        if self.objects < 1 || self.categories < 1 || self.frames < 1 || self.observations_per_object < 1 {
            return bad("counts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.label_flip) {
            return bad("label_flip must lie in [0, 1]");
        }
        if !(self.sigma_center >= 0.0 && self.sigma_size >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !self.extent.iter().all(|e| *e > 0.0 && e.is_finite()) {
            return bad("extent must be positive");
        }
        let [lo, hi] = self.semi_axis_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("semi_axis_range must satisfy 0 < min <= max");
        }
        if !(self.frame_interval > 0.0) {
            return bad("frame_interval must be positive");
        }
        Ok(())
    }
}

/// Everything a relocalization run and its evaluation need.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub categories: CategorySet,
    pub objects: Vec<ObjectLandmark>,
    pub frames: Vec<Frame>,
    pub trajectory: Trajectory,
    pub camera: CameraIntrinsics,
}

impl SyntheticScene {
    /// Writes `map.json`, `detections.jsonl`, `groundtruth.txt` and `intrinsics.txt`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_map(dir.join("map.json"), &self.categories, &self.objects)?;
        save_detections(dir.join("detections.jsonl"), &self.categories, &self.frames)?;
        save_trajectory(dir.join("groundtruth.txt"), &self.trajectory)?;
        save_intrinsics(dir.join("intrinsics.txt"), &self.camera)
    }
}

pub fn category_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| CATEGORY_NAMES.get(i).map_or_else(|| format!("category{i}"), |s| s.to_string()))
        .collect()
}

fn scene_center(cfg: &SynthConfig) -> Vector3<f64> {
    Vector3::new(0.0, 0.0, 0.5 * cfg.extent[2])
}

fn camera_pose(cfg: &SynthConfig, i: usize, rng: &mut ChaCha8Rng) -> PoseSE3 {
    let center = scene_center(cfg);
    let radius = 0.5 * cfg.extent[0].max(cfg.extent[1]) + 3.0;
    let height = cfg.extent[2] + 1.0;
    let (angle, r, h, target) = match cfg.camera_path {
        CameraPath::Orbit => (std::f64::consts::TAU * i as f64 / cfg.frames as f64, radius, height, center),
        CameraPath::Random => {
            let jitter = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
            (
                rng.random_range(0.0..std::f64::consts::TAU),
                radius * rng.random_range(0.85..1.15),
                height * rng.random_range(0.7..1.3),
                center + jitter,
            )
        }
    };
    let eye = Vector3::new(r * angle.cos(), r * angle.sin(), h);
    PoseSE3::look_at(&eye, &target, &Vector3::z()).expect("eye is never above the target")
}

/// Exact rendered box of an object, if its centroid is in view.
pub fn render_box(obj: &ObjectLandmark, pose: &PoseSE3, camera: &CameraIntrinsics) -> Option<BoundingBox> {
    let c = project_center(pose, camera, obj.quadric.position()).ok()?;
    if !camera.contains(&c) {
        return None;
    }
    let e = project_quadric(&obj.quadric, pose, camera).ok()?;
    e.bounding_box().clamp_to(camera.width(), camera.height()).ok()
}

fn other_label(rng: &mut ChaCha8Rng, label: usize, n: usize) -> usize {
    let k = rng.random_range(0..n - 1);
    if k >= label {
        k + 1
    } else {
        k
    }
}

/// Places `objects` at uniform random positions with the given labels.
fn place_objects(cfg: &SynthConfig, labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<(DualQuadric, usize)> {
    let [ex, ey, ez] = cfg.extent;
    let [lo, hi] = cfg.semi_axis_range;
    labels
        .iter()
        .map(|&label| {
            let p = Vector3::new(
                rng.random_range(-0.5 * ex..=0.5 * ex),
                rng.random_range(-0.5 * ey..=0.5 * ey),
                rng.random_range(0.0..=ez),
            );
            let axes = Vector3::from_fn(|_, _| rng.random_range(lo..=hi));
            let yaw = rng.random_range(0.0..std::f64::consts::TAU);
            let q = DualQuadric::new(p, UnitQuaternion::from_euler_angles(0.0, 0.0, yaw), axes).expect("positive axes");
            (q, label)
        })
        .collect()
}

/// Map sightings: all carry the true label; each object may additionally
/// have one weaker confused sighting, so the mode stays correct.
fn observations(cfg: &SynthConfig, label: usize, rng: &mut ChaCha8Rng) -> Vec<Observation> {
    let mut obs: Vec<Observation> = (0..cfg.observations_per_object)
        .map(|k| Observation {
            keyframe: k as u64,
            label: CategoryId(label),
            score: rng.random_range(0.5..=1.0),
        })
        .collect();
    if cfg.categories > 1 && rng.random_bool(0.3) {
        obs.push(Observation {
            keyframe: cfg.observations_per_object as u64,
            label: CategoryId(other_label(rng, label, cfg.categories)),
            score: rng.random_range(0.1..0.4),
        });
    }
    obs
}

/// Generates a scene with uniformly drawn object labels.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels: Vec<usize> = (0..cfg.objects).map(|_| rng.random_range(0..cfg.categories)).collect();
    let placed = place_objects(cfg, &labels, &mut rng);
    generate_from_quadrics(cfg, placed, rng)
}

/// Generates a scene around caller-supplied quadrics and labels.
pub fn generate_with_objects(cfg: &SynthConfig, objects: Vec<(DualQuadric, usize)>) -> Result<SyntheticScene> {
    cfg.validate()?;
    if let Some((_, l)) = objects.iter().find(|(_, l)| *l >= cfg.categories) {
        return Err(Error::InvariantViolation(format!("label {l} outside {} categories", cfg.categories)));
    }
    generate_from_quadrics(cfg, objects, ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn generate_from_quadrics(
    cfg: &SynthConfig,
    placed: Vec<(DualQuadric, usize)>,
    mut rng: ChaCha8Rng,
) -> Result<SyntheticScene> {
    let categories = CategorySet::new(category_names(cfg.categories))?;
    let objects = placed
        .iter()
        .enumerate()
        .map(|(i, (q, label))| {
            let obs = observations(cfg, *label, &mut rng);
            ObjectLandmark::from_observations(i as u64, *q, obs, &categories)
        })
        .collect::<Result<Vec<_>>>()?;

    let center_noise = Normal::new(0.0, cfg.sigma_center).expect("sigma validated");
    let size_noise = Normal::new(0.0, cfg.sigma_size).expect("sigma validated");
    let (w, h) = (cfg.camera.width(), cfg.camera.height());
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut poses = Vec::with_capacity(cfg.frames);
    for i in 0..cfg.frames {
        let pose = camera_pose(cfg, i, &mut rng);
        let timestamp = 1.0 + i as f64 * cfg.frame_interval;
        let mut detections = Vec::new();
        for (obj, (_, label)) in objects.iter().zip(&placed) {
            let Some(exact) = render_box(obj, &pose, &cfg.camera) else {
                continue;
            };
            let bbox = if cfg.sigma_center > 0.0 || cfg.sigma_size > 0.0 {
                let c = exact.center() + Vector2::new(center_noise.sample(&mut rng), center_noise.sample(&mut rng));
                let bw = exact.width() * (1.0 + size_noise.sample(&mut rng)).max(0.05);
                let bh = exact.height() * (1.0 + size_noise.sample(&mut rng)).max(0.05);
                match BoundingBox::from_center_size(&c, bw, bh).and_then(|b| b.clamp_to(w, h)) {
                    Ok(b) => b,
                    Err(_) => continue,
                }
            } else {
                exact
            };
            let label = if cfg.categories > 1 && rng.random_bool(cfg.label_flip) {
                other_label(&mut rng, *label, cfg.categories)
            } else {
                *label
            };
            let score = rng.random_range(0.5..=1.0);
            detections.push(Detection::new(bbox, CategoryId(label), score)?);
        }
        detections.shuffle(&mut rng);
        frames.push(Frame {
            frame_id: i as u64,
            timestamp,
            detections,
        });
        poses.push((timestamp, pose));
    }
    Ok(SyntheticScene {
        categories,
        objects,
        frames,
        trajectory: Trajectory::new(poses),
        camera: cfg.camera,
    })
}
