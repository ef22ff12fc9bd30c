//! FEAT1 keypoint/descriptor files, one per image.
//!
//! Layout (little-endian): `b"FEAT1"`, `u32` keypoint count, `u32` descriptor
//! dimension, `count x (f32 x, f32 y)`, then `count x dim` f32 descriptors in
//! row-major order.

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector2;

use super::ModelIoError;

const MAGIC: &[u8; 5] = b"FEAT1";

/// Keypoints and descriptors of one image.
///
/// Keypoints are held in `f64`; the file stores them as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub image_name: String,
    pub keypoints: Vec<Vector2<f64>>,
    pub dim: usize,
    descriptors: Vec<f32>,
}

impl FeatureSet {
    pub fn new(
        image_name: impl Into<String>,
        keypoints: Vec<Vector2<f64>>,
        dim: usize,
        descriptors: Vec<f32>,
    ) -> Result<Self, ModelIoError> {
        if descriptors.len() != keypoints.len() * dim {
            return Err(ModelIoError::Invariant(format!(
                "{} keypoints x dim {dim} needs {} descriptor values, got {}",
                keypoints.len(),
                keypoints.len() * dim,
                descriptors.len()
            )));
        }
        if keypoints
            .iter()
            .any(|k| !k.x.is_finite() || !k.y.is_finite())
        {
            return Err(ModelIoError::Invariant("non-finite keypoint".into()));
        }
        Ok(Self {
            image_name: image_name.into(),
            keypoints,
            dim,
            descriptors,
        })
    }

    pub fn empty(image_name: impl Into<String>, dim: usize) -> Self {
        Self {
            image_name: image_name.into(),
            keypoints: Vec::new(),
            dim,
            descriptors: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn descriptors(&self) -> &[f32] {
        &self.descriptors
    }
}

fn feature_path(dir: &Path, image_name: &str) -> PathBuf {
    dir.join(format!("{image_name}.feat"))
}

pub fn write_features(path: &Path, features: &FeatureSet) -> Result<(), ModelIoError> {
    let mut buf = Vec::with_capacity(13 + features.len() * (8 + 4 * features.dim));
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(features.len() as u32)
        .unwrap();
    buf.write_u32::<LittleEndian>(features.dim as u32).unwrap();
    for kp in &features.keypoints {
        buf.write_f32::<LittleEndian>(kp.x as f32).unwrap();
        buf.write_f32::<LittleEndian>(kp.y as f32).unwrap();
    }
    for &d in &features.descriptors {
        buf.write_f32::<LittleEndian>(d).unwrap();
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| ModelIoError::io(parent, e))?;
    }
    std::fs::write(path, buf).map_err(|e| ModelIoError::io(path, e))
}

/// Reads one FEAT1 file; the image name is the file name without `.feat`.
pub fn read_features(path: &Path) -> Result<FeatureSet, ModelIoError> {
    let bytes = std::fs::read(path).map_err(|e| ModelIoError::io(path, e))?;
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.strip_suffix(".feat").unwrap_or(n).to_string())
        .unwrap_or_default();
    decode(path, &bytes, name)
}

fn decode(path: &Path, bytes: &[u8], image_name: String) -> Result<FeatureSet, ModelIoError> {
    if bytes.len() < 5 || &bytes[..5] != MAGIC {
        return Err(ModelIoError::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let truncated = |detail: &str| ModelIoError::Truncated {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let mut cur = Cursor::new(&bytes[5..]);
    let count = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| truncated("keypoint count"))? as usize;
    let dim = cur
        .read_u32::<LittleEndian>()
        .map_err(|_| truncated("descriptor dimension"))? as usize;
    let expected = (count as u64) * 8 + (count as u64) * (dim as u64) * 4;
    let available = (bytes.len() - 13) as u64;
    if available < expected {
        return Err(truncated(&format!(
            "{count} keypoints x dim {dim} needs {expected} bytes, {available} present"
        )));
    }
    if available > expected {
        return Err(ModelIoError::Parse {
            path: path.to_path_buf(),
            line: 0,
            detail: format!("{} trailing bytes", available - expected),
        });
    }
    let mut keypoints = Vec::with_capacity(count);
    for _ in 0..count {
        let x = cur
            .read_f32::<LittleEndian>()
            .map_err(|_| truncated("keypoints"))?;
        let y = cur
            .read_f32::<LittleEndian>()
            .map_err(|_| truncated("keypoints"))?;
        keypoints.push(Vector2::new(x as f64, y as f64));
    }
    let mut descriptors = vec![0f32; count * dim];
    cur.read_f32_into::<LittleEndian>(&mut descriptors)
        .map_err(|_| truncated("descriptors"))?;
    FeatureSet::new(image_name, keypoints, dim, descriptors).map_err(|e| match e {
        ModelIoError::Invariant(detail) => ModelIoError::Parse {
            path: path.to_path_buf(),
            line: 0,
            detail,
        },
        other => other,
    })
}

/// Loads `<dir>/<name>.feat` for every name, requiring one descriptor dimension.
pub fn read_features_for_images<'a>(
    dir: &Path,
    names: impl IntoIterator<Item = &'a str>,
) -> Result<BTreeMap<String, FeatureSet>, ModelIoError> {
    let mut out = BTreeMap::new();
    let mut dim: Option<usize> = None;
    for name in names {
        let path = feature_path(dir, name);
        let mut feats = read_features(&path)?;
        feats.image_name = name.to_string();
        match dim {
            None => dim = Some(feats.dim),
            Some(d) if d != feats.dim && !feats.is_empty() => {
                return Err(ModelIoError::DimMismatch {
                    path,
                    expected: d,
                    got: feats.dim,
                })
            }
            _ => {}
        }
        out.insert(name.to_string(), feats);
    }
    Ok(out)
}

/// Path of the feature file for `image_name` under `dir`.
pub fn features_path(dir: &Path, image_name: &str) -> PathBuf {
    feature_path(dir, image_name)
}
