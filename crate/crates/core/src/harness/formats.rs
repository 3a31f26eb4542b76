//! Map (JSON), detection (JSON Lines), trajectory (TUM) and intrinsics files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::geometry::{BoundingBox, CameraIntrinsics, DualQuadric, PoseSE3};
use crate::semantics::{CategoryDistribution, CategorySet, Detection, ObjectLandmark, Observation};

pub const MAP_FORMAT: &str = "goreloc-map";
pub const DETECTIONS_FORMAT: &str = "goreloc-detections";
pub const FORMAT_VERSION: u32 = 1;
/// Tolerance on quaternion norms read from files.
const UNIT_TOLERANCE: f64 = 1e-6;

/// Self-describing block at the top of every structured file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHeader {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub units: BTreeMap<String, String>,
}

impl FileHeader {
    pub fn new(format: &str, units: &[(&str, &str)]) -> Self {
        Self {
            format: format.to_string(),
            version: FORMAT_VERSION,
            units: units.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn check(&self, format: &str, path: &Path, line: usize) -> Result<()> {
        if self.format != format {
            return Err(Error::parse(path, line, format!("expected format `{format}`, found `{}`", self.format)));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::parse(path, line, format!("unsupported version {}", self.version)));
        }
        Ok(())
    }
}

fn json_error(path: &Path, line_offset: usize, e: serde_json::Error) -> Error {
    Error::parse(path, line_offset + e.line(), e.to_string())
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- map

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMap {
    header: FileHeader,
    categories: Vec<String>,
    objects: Vec<RawObject>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObject {
    id: u64,
    position: [f64; 3],
    /// (w, x, y, z)
    orientation: [f64; 4],
    semi_axes: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    observations: Option<Vec<RawObservation>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distribution: Option<Vec<RawMass>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObservation {
    keyframe: u64,
    label: String,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMass {
    category: String,
    p: f64,
}

fn unit_quaternion(wxyz: [f64; 4]) -> Result<UnitQuaternion<f64>> {
    let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    if !((q.norm() - 1.0).abs() <= UNIT_TOLERANCE) {
        return Err(Error::InvariantViolation(format!("quaternion {wxyz:?} is not unit length")));
    }
    Ok(UnitQuaternion::new_normalize(q))
}

fn wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Object label distributions may be given directly; they must be a
/// probability vector (sum 1 within 1e-6).
fn distribution_from_raw(raw: &[RawMass], cats: &CategorySet) -> Result<CategoryDistribution> {
    let mut p = vec![0.0; cats.len()];
    for m in raw {
        let id = cats.index(&m.category)?;
        if !(m.p >= 0.0 && m.p.is_finite()) {
            return Err(Error::InvariantViolation(format!("probability {} for `{}`", m.p, m.category)));
        }
        p[id.0] += m.p;
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvariantViolation(format!("distribution sums to {total}, not 1")));
    }
    CategoryDistribution::from_vec(p)
}

fn object_from_raw(raw: RawObject, cats: &CategorySet) -> Result<ObjectLandmark> {
    let quadric = DualQuadric::new(
        Vector3::from(raw.position),
        unit_quaternion(raw.orientation)?,
        Vector3::from(raw.semi_axes),
    )?;
    match (raw.observations, raw.distribution) {
        (Some(obs), None) => {
            let obs = obs
                .into_iter()
                .map(|o| {
                    Ok(Observation {
                        keyframe: o.keyframe,
                        label: cats.index(&o.label)?,
                        score: o.score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ObjectLandmark::from_observations(raw.id, quadric, obs, cats)
        }
        (None, Some(dist)) => Ok(ObjectLandmark::with_distribution(raw.id, quadric, distribution_from_raw(&dist, cats)?)),
        _ => Err(Error::InvariantViolation(format!(
            "object {} needs exactly one of `observations` or `distribution`",
            raw.id
        ))),
    }
}

/// Parses a map from JSON text; `path` is only used in error messages.
pub fn parse_map(text: &str, path: &Path) -> Result<(CategorySet, Vec<ObjectLandmark>)> {
    let raw: RawMap = serde_json::from_str(text).map_err(|e| json_error(path, 0, e))?;
    raw.header.check(MAP_FORMAT, path, 1)?;
    let cats = CategorySet::new(raw.categories)?;
    let mut seen = HashSet::new();
    let mut objects = Vec::with_capacity(raw.objects.len());
    for o in raw.objects {
        if !seen.insert(o.id) {
            return Err(Error::InvariantViolation(format!("duplicate object id {}", o.id)));
        }
        objects.push(object_from_raw(o, &cats)?);
    }
    Ok((cats, objects))
}

pub fn load_map(path: impl AsRef<Path>) -> Result<(CategorySet, Vec<ObjectLandmark>)> {
    let path = path.as_ref();
    parse_map(&read_to_string(path)?, path)
}

/// Serializes a map. Objects with observations are written with their
/// observations (the distribution is derived again on load); others with
/// their distribution.
pub fn map_to_json(cats: &CategorySet, objects: &[ObjectLandmark]) -> String {
    let raw = RawMap {
        header: FileHeader::new(MAP_FORMAT, &[("position", "m"), ("semi_axes", "m"), ("orientation", "quaternion wxyz")]),
        categories: cats.names().to_vec(),
        objects: objects
            .iter()
            .map(|o| {
                let q = &o.quadric;
                let (observations, distribution) = if o.observations.is_empty() {
                    let masses = o
                        .distribution
                        .as_slice()
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| **p > 0.0)
                        .map(|(i, p)| RawMass {
                            category: cats.names()[i].clone(),
                            p: *p,
                        })
                        .collect();
                    (None, Some(masses))
                } else {
                    let obs = o
                        .observations
                        .iter()
                        .map(|ob| RawObservation {
                            keyframe: ob.keyframe,
                            label: cats.name(ob.label).to_string(),
                            score: ob.score,
                        })
                        .collect();
                    (Some(obs), None)
                };
                RawObject {
                    id: o.id,
                    position: (*q.position()).into(),
                    orientation: wxyz(q.orientation()),
                    semi_axes: (*q.semi_axes()).into(),
                    observations,
                    distribution,
                }
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&raw).expect("map serializes");
    s.push('\n');
    s
}

pub fn save_map(path: impl AsRef<Path>, cats: &CategorySet, objects: &[ObjectLandmark]) -> Result<()> {
    write_bytes(path.as_ref(), map_to_json(cats, objects).as_bytes())
}

// ---------------------------------------------------------------- detections

/// Detector output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    /// Seconds.
    pub timestamp: f64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFrame {
    frame_id: u64,
    timestamp: f64,
    detections: Vec<RawDetection>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    /// [x_min, y_min, x_max, y_max]
    bbox: [f64; 4],
    label: String,
    score: f64,
}

/// Streaming reader over a detections file: one header line, then one JSON
/// frame record per line. Boxes are clamped to the image; boxes left empty
/// by clamping are dropped with a warning.
pub struct DetectionReader<R> {
    path: PathBuf,
    lines: Lines<R>,
    line: usize,
    cats: CategorySet,
    camera: CameraIntrinsics,
    last_timestamp: Option<f64>,
}

impl<R: BufRead> DetectionReader<R> {
    pub fn new(reader: R, path: impl Into<PathBuf>, cats: &CategorySet, camera: &CameraIntrinsics) -> Result<Self> {
        let path = path.into();
        let mut lines = reader.lines();
        let mut line = 0;
        let header = loop {
            line += 1;
            match lines.next() {
                None => return Err(Error::parse(&path, line, "missing header line")),
                Some(Err(e)) => return Err(Error::io(&path, e)),
                Some(Ok(l)) if l.trim().is_empty() => continue,
                Some(Ok(l)) => break l,
            }
        };
        let header: FileHeader = serde_json::from_str(&header).map_err(|e| Error::parse(&path, line, e.to_string()))?;
        header.check(DETECTIONS_FORMAT, &path, line)?;
        Ok(Self {
            path,
            lines,
            line,
            cats: cats.clone(),
            camera: *camera,
            last_timestamp: None,
        })
    }

    fn frame_from_raw(&self, raw: RawFrame) -> Result<Frame> {
        let err = |msg: String| Error::parse(&self.path, self.line, msg);
        if !raw.timestamp.is_finite() {
            return Err(err("non-finite timestamp".into()));
        }
        if let Some(prev) = self.last_timestamp {
            if raw.timestamp <= prev {
                return Err(err(format!("timestamp {} does not increase (previous {prev})", raw.timestamp)));
            }
        }
        let mut detections = Vec::with_capacity(raw.detections.len());
        for d in raw.detections {
            let label = self.cats.index(&d.label).map_err(|e| err(e.to_string()))?;
            let [x0, y0, x1, y1] = d.bbox;
            let bbox = BoundingBox::new(x0, y0, x1, y1).map_err(|e| err(format!("bbox {:?}: {e}", d.bbox)))?;
            let Ok(bbox) = bbox.clamp_to(self.camera.width(), self.camera.height()) else {
                warn!("{}:{}: dropping box {:?} outside the image", self.path.display(), self.line, d.bbox);
                continue;
            };
            detections.push(Detection::new(bbox, label, d.score).map_err(|e| err(e.to_string()))?);
        }
        Ok(Frame {
            frame_id: raw.frame_id,
            timestamp: raw.timestamp,
            detections,
        })
    }
}

impl<R: BufRead> Iterator for DetectionReader<R> {
    type Item = Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.line += 1;
            let text = match self.lines.next()? {
                Ok(t) => t,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            if text.trim().is_empty() {
                continue;
            }
            let frame = serde_json::from_str::<RawFrame>(&text)
                .map_err(|e| Error::parse(&self.path, self.line, e.to_string()))
                .and_then(|raw| self.frame_from_raw(raw));
            if let Ok(f) = &frame {
                self.last_timestamp = Some(f.timestamp);
            }
            return Some(frame);
        }
    }
}

pub fn open_detections(
    path: impl AsRef<Path>,
    cats: &CategorySet,
    camera: &CameraIntrinsics,
) -> Result<DetectionReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    DetectionReader::new(BufReader::new(file), path, cats, camera)
}

/// Reads every frame of a detections file.
pub fn load_detections(path: impl AsRef<Path>, cats: &CategorySet, camera: &CameraIntrinsics) -> Result<Vec<Frame>> {
    open_detections(path, cats, camera)?.collect()
}

pub fn write_detections<W: Write>(mut out: W, cats: &CategorySet, frames: &[Frame]) -> std::io::Result<()> {
    let header = FileHeader::new(DETECTIONS_FORMAT, &[("bbox", "px"), ("timestamp", "s")]);
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for f in frames {
        let raw = RawFrame {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            detections: f
                .detections
                .iter()
                .map(|d| RawDetection {
                    bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max],
                    label: cats.name(d.label).to_string(),
                    score: d.score,
                })
                .collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&raw).expect("frame serializes"))?;
    }
    out.flush()
}

pub fn save_detections(path: impl AsRef<Path>, cats: &CategorySet, frames: &[Frame]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_detections(BufWriter::new(file), cats, frames).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- trajectory

/// Parses TUM lines `timestamp tx ty tz qx qy qz qw`, where the pose maps
/// camera to world; the result holds world-to-camera poses.
pub fn parse_trajectory(text: &str, path: &Path) -> Result<Trajectory> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        let [ts, tx, ty, tz, qx, qy, qz, qw] = fields[..] else {
            return Err(Error::parse(path, line_no, format!("expected 8 fields, found {}", fields.len())));
        };
        if !fields.iter().all(|v| v.is_finite()) {
            return Err(Error::parse(path, line_no, "non-finite value"));
        }
        let q = unit_quaternion([qw, qx, qy, qz]).map_err(|e| Error::parse(path, line_no, e.to_string()))?;
        let cam_to_world = PoseSE3::from_quaternion(&q, Vector3::new(tx, ty, tz));
        entries.push((ts, cam_to_world.inverse()));
    }
    Ok(Trajectory::new(entries))
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    parse_trajectory(&read_to_string(path)?, path)
}

pub fn trajectory_to_tum(traj: &Trajectory) -> String {
    let mut s = String::from("# timestamp tx ty tz qx qy qz qw (camera to world)\n");
    for (ts, pose) in traj.iter() {
        let c2w = pose.inverse();
        let t = c2w.translation();
        let q = c2w.quaternion();
        s.push_str(&format!("{ts} {} {} {} {} {} {} {}\n", t.x, t.y, t.z, q.i, q.j, q.k, q.w));
    }
    s
}

pub fn save_trajectory(path: impl AsRef<Path>, traj: &Trajectory) -> Result<()> {
    write_bytes(path.as_ref(), trajectory_to_tum(traj).as_bytes())
}

// ---------------------------------------------------------------- intrinsics

/// Reads `fx,fy,cx,cy,width,height` from the first non-comment line.
pub fn load_intrinsics(path: impl AsRef<Path>) -> Result<CameraIntrinsics> {
    let path = path.as_ref();
    let text = read_to_string(path)?;
    let (i, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or_else(|| Error::parse(path, 1, "empty intrinsics file"))?;
    line.trim().parse().map_err(|e: Error| Error::parse(path, i + 1, e.to_string()))
}

pub fn save_intrinsics(path: impl AsRef<Path>, camera: &CameraIntrinsics) -> Result<()> {
    write_bytes(path.as_ref(), format!("{camera}\n").as_bytes())
}
