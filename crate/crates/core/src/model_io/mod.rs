//! Sparse reconstruction models, feature files and metric tables.
//!
//! The sparse model layout is the de facto `cameras / images / points3D`
//! triple, in either a little-endian binary or a whitespace text encoding.
//! Ids are kept exactly as read; nothing here renumbers.

mod binary;
mod features;
mod metrics;
mod text;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, Pose};
use crate::{CameraId, ImageId, PointId};

pub use features::{
    features_path, read_features, read_features_for_images, write_features, FeatureSet,
};
pub use metrics::{read_metric_table, write_metric_table, MetricKind, MetricRecord, MetricTable};

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed header: {detail}")]
    MalformedHeader { path: PathBuf, detail: String },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{path}: truncated payload: {detail}")]
    Truncated { path: PathBuf, detail: String },
    #[error("{path}: bad magic, expected FEAT1")]
    BadMagic { path: PathBuf },
    #[error("unknown camera model {0}")]
    UnknownCameraModel(String),
    #[error("dangling reference: {kind} {id} ({context})")]
    DanglingReference {
        kind: &'static str,
        id: u64,
        context: String,
    },
    #[error("descriptor dimension mismatch in {path}: expected {expected}, got {got}")]
    DimMismatch {
        path: PathBuf,
        expected: usize,
        got: usize,
    },
    #[error("{path}: row {row}: duplicate metric ({scene}, {view}, {metric})")]
    DuplicateMetric {
        path: PathBuf,
        row: usize,
        scene: String,
        view: String,
        metric: String,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl ModelIoError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            ModelIoError::MissingFile(path.to_path_buf())
        } else {
            ModelIoError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelFormat {
    Text,
    Binary,
}

impl ModelFormat {
    fn extension(self) -> &'static str {
        match self {
            ModelFormat::Text => "txt",
            ModelFormat::Binary => "bin",
        }
    }

    /// Picks the format whose `cameras` file exists in `dir`, preferring binary.
    pub fn detect(dir: &Path) -> Option<Self> {
        [ModelFormat::Binary, ModelFormat::Text]
            .into_iter()
            .find(|f| dir.join(format!("cameras.{}", f.extension())).is_file())
    }
}

impl FromStr for ModelFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" | "txt" => Ok(ModelFormat::Text),
            "binary" | "bin" => Ok(ModelFormat::Binary),
            other => Err(format!("unknown model format '{other}'")),
        }
    }
}

impl fmt::Display for ModelFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelFormat::Text => "text",
            ModelFormat::Binary => "binary",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRecord {
    pub camera_id: CameraId,
    pub width: u64,
    pub height: u64,
    pub model: CameraModel,
}

/// One 2D keypoint of an image and its optional link to a 3D point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageObservation {
    pub xy: Vector2<f64>,
    pub point3d_id: Option<PointId>,
}

impl ImageObservation {
    pub fn unlinked(xy: Vector2<f64>) -> Self {
        Self {
            xy,
            point3d_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: ImageId,
    pub pose: Pose,
    pub camera_id: CameraId,
    pub name: String,
    pub observations: Vec<ImageObservation>,
}

impl ImageRecord {
    pub fn num_linked(&self) -> usize {
        self.observations
            .iter()
            .filter(|o| o.point3d_id.is_some())
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TrackElement {
    pub image_id: ImageId,
    pub obs_index: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3DRecord {
    pub point3d_id: PointId,
    pub xyz: Vector3<f64>,
    pub rgb: [u8; 3],
    pub error: f64,
    pub track: Vec<TrackElement>,
}

/// Cameras, posed images and triangulated points, keyed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseModel {
    pub cameras: BTreeMap<CameraId, CameraRecord>,
    pub images: BTreeMap<ImageId, ImageRecord>,
    pub points: BTreeMap<PointId, Point3DRecord>,
}

const QUAT_NORM_TOL: f64 = 1e-9;

impl SparseModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn image_by_name(&self, name: &str) -> Option<&ImageRecord> {
        self.images.values().find(|im| im.name == name)
    }

    pub fn camera_of(&self, image_id: ImageId) -> Option<&CameraRecord> {
        self.images
            .get(&image_id)
            .and_then(|im| self.cameras.get(&im.camera_id))
    }

    /// Smallest id strictly above every existing point id.
    pub fn next_point_id(&self) -> PointId {
        self.points.keys().next_back().map_or(1, |id| id + 1)
    }

    /// Number of 2D observations linked to a 3D point.
    pub fn num_linked_observations(&self) -> usize {
        self.points.values().map(|p| p.track.len()).sum()
    }

    /// Inserts a point and writes the back-links into its images.
    pub fn insert_point(&mut self, point: Point3DRecord) {
        for el in &point.track {
            let image = self
                .images
                .get_mut(&el.image_id)
                .expect("track references a known image");
            image.observations[el.obs_index as usize].point3d_id = Some(point.point3d_id);
        }
        self.points.insert(point.point3d_id, point);
    }

    /// Removes a point and clears its back-links.
    pub fn remove_point(&mut self, point_id: PointId) -> Option<Point3DRecord> {
        let point = self.points.remove(&point_id)?;
        for el in &point.track {
            if let Some(image) = self.images.get_mut(&el.image_id) {
                if let Some(obs) = image.observations.get_mut(el.obs_index as usize) {
                    if obs.point3d_id == Some(point_id) {
                        obs.point3d_id = None;
                    }
                }
            }
        }
        Some(point)
    }

    /// Drops every point and every 2D→3D link.
    pub fn clear_points(&mut self) {
        self.points.clear();
        for image in self.images.values_mut() {
            for obs in &mut image.observations {
                obs.point3d_id = None;
            }
        }
    }

    /// Checks every type invariant and referential integrity in both directions.
    pub fn validate(&self) -> Result<(), ModelIoError> {
        for (&id, cam) in &self.cameras {
            if id != cam.camera_id || id == 0 || id > i32::MAX as u32 {
                return Err(ModelIoError::Invariant(format!(
                    "camera key {id} / record id {}",
                    cam.camera_id
                )));
            }
            if cam.width == 0 || cam.height == 0 {
                return Err(ModelIoError::Invariant(format!(
                    "camera {id} has zero image size"
                )));
            }
            cam.model
                .validate()
                .map_err(|e| ModelIoError::Invariant(format!("camera {id}: {e}")))?;
        }

        for (&id, image) in &self.images {
            if id != image.image_id || id == 0 || id > i32::MAX as u32 {
                return Err(ModelIoError::Invariant(format!(
                    "image key {id} / record id {}",
                    image.image_id
                )));
            }
            if !self.cameras.contains_key(&image.camera_id) {
                return Err(ModelIoError::DanglingReference {
                    kind: "camera",
                    id: image.camera_id as u64,
                    context: format!("referenced by image {id}"),
                });
            }
            let q = image.pose.rotation().quaternion();
            if (q.norm() - 1.0).abs() > QUAT_NORM_TOL || !q.coords.iter().all(|c| c.is_finite()) {
                return Err(ModelIoError::Invariant(format!(
                    "image {id} quaternion norm {}",
                    q.norm()
                )));
            }
            if !image.pose.translation().iter().all(|c| c.is_finite()) {
                return Err(ModelIoError::Invariant(format!(
                    "image {id} has non-finite translation"
                )));
            }
            if image.name.is_empty() || image.name.contains('\0') {
                return Err(ModelIoError::Invariant(format!(
                    "image {id} has an invalid name"
                )));
            }
            let mut seen = HashSet::new();
            for (idx, obs) in image.observations.iter().enumerate() {
                if !obs.xy.iter().all(|c| c.is_finite()) {
                    return Err(ModelIoError::Invariant(format!(
                        "image {id} observation {idx} is not finite"
                    )));
                }
                let Some(pid) = obs.point3d_id else { continue };
                if !seen.insert(pid) {
                    return Err(ModelIoError::Invariant(format!(
                        "image {id} observes point {pid} twice"
                    )));
                }
                let point = self
                    .points
                    .get(&pid)
                    .ok_or(ModelIoError::DanglingReference {
                        kind: "point3D",
                        id: pid,
                        context: format!("referenced by image {id} observation {idx}"),
                    })?;
                let back = TrackElement {
                    image_id: id,
                    obs_index: idx as u32,
                };
                if !point.track.contains(&back) {
                    return Err(ModelIoError::Invariant(format!(
                        "point {pid} track lacks ({id}, {idx})"
                    )));
                }
            }
        }

        for (&id, point) in &self.points {
            if id != point.point3d_id || id == 0 || id > i64::MAX as u64 {
                return Err(ModelIoError::Invariant(format!(
                    "point key {id} / record id {}",
                    point.point3d_id
                )));
            }
            if !point.xyz.iter().all(|c| c.is_finite()) {
                return Err(ModelIoError::Invariant(format!("point {id} is not finite")));
            }
            if !(point.error >= 0.0) {
                return Err(ModelIoError::Invariant(format!(
                    "point {id} has negative or NaN error"
                )));
            }
            if point.track.len() < 2 {
                return Err(ModelIoError::Invariant(format!(
                    "point {id} has track length {}",
                    point.track.len()
                )));
            }
            let mut seen = HashSet::new();
            for el in &point.track {
                if !seen.insert(*el) {
                    return Err(ModelIoError::Invariant(format!(
                        "point {id} lists ({}, {}) twice",
                        el.image_id, el.obs_index
                    )));
                }
                let image =
                    self.images
                        .get(&el.image_id)
                        .ok_or(ModelIoError::DanglingReference {
                            kind: "image",
                            id: el.image_id as u64,
                            context: format!("in track of point {id}"),
                        })?;
                let obs = image.observations.get(el.obs_index as usize).ok_or(
                    ModelIoError::DanglingReference {
                        kind: "observation",
                        id: el.obs_index as u64,
                        context: format!("image {} in track of point {id}", el.image_id),
                    },
                )?;
                if obs.point3d_id != Some(id) {
                    return Err(ModelIoError::Invariant(format!(
                        "point {id} track element ({}, {}) is not linked back",
                        el.image_id, el.obs_index
                    )));
                }
            }
        }
        Ok(())
    }
}

fn model_paths(dir: &Path, format: ModelFormat) -> [PathBuf; 3] {
    let ext = format.extension();
    [
        dir.join(format!("cameras.{ext}")),
        dir.join(format!("images.{ext}")),
        dir.join(format!("points3D.{ext}")),
    ]
}

/// Reads and validates a sparse model directory.
pub fn read_model(dir: &Path, format: ModelFormat) -> Result<SparseModel, ModelIoError> {
    let [cams, imgs, pts] = model_paths(dir, format);
    for p in [&cams, &imgs, &pts] {
        if !p.is_file() {
            return Err(ModelIoError::MissingFile(p.clone()));
        }
    }
    let model = match format {
        ModelFormat::Binary => SparseModel {
            cameras: binary::read_cameras(&cams)?,
            images: binary::read_images(&imgs)?,
            points: binary::read_points(&pts)?,
        },
        ModelFormat::Text => SparseModel {
            cameras: text::read_cameras(&cams)?,
            images: text::read_images(&imgs)?,
            points: text::read_points(&pts)?,
        },
    };
    model.validate()?;
    Ok(model)
}

/// Writes a model, creating `dir` if needed. Records are emitted in ascending id order.
pub fn write_model(
    model: &SparseModel,
    dir: &Path,
    format: ModelFormat,
) -> Result<(), ModelIoError> {
    model.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| ModelIoError::io(dir, e))?;
    let [cams, imgs, pts] = model_paths(dir, format);
    match format {
        ModelFormat::Binary => {
            binary::write_cameras(model, &cams)?;
            binary::write_images(model, &imgs)?;
            binary::write_points(model, &pts)?;
        }
        ModelFormat::Text => {
            text::write_cameras(model, &cams)?;
            text::write_images(model, &imgs)?;
            text::write_points(model, &pts)?;
        }
    }
    Ok(())
}

/// Encodes the binary `cameras`, `images` and `points3D` payloads in memory.
pub fn encode_binary(model: &SparseModel) -> Result<[Vec<u8>; 3], ModelIoError> {
    model.validate()?;
    Ok([
        binary::encode_cameras(model),
        binary::encode_images(model),
        binary::encode_points(model),
    ])
}
