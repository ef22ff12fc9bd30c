use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};

use super::{
    CameraRecord, ImageObservation, ImageRecord, ModelIoError, Point3DRecord, SparseModel,
    TrackElement,
};
use crate::geometry::{CameraModel, CameraModelKind, Pose};
use crate::{CameraId, ImageId, PointId};

type LE = LittleEndian;

struct Reader<'a> {
    path: &'a Path,
    cursor: Cursor<Vec<u8>>,
}

impl<'a> Reader<'a> {
    fn open(path: &'a Path) -> Result<Self, ModelIoError> {
        let bytes = std::fs::read(path).map_err(|e| ModelIoError::io(path, e))?;
        Ok(Self {
            path,
            cursor: Cursor::new(bytes),
        })
    }

    fn remaining(&self) -> u64 {
        self.cursor.get_ref().len() as u64 - self.cursor.position()
    }

    fn count(&mut self, min_record_bytes: u64) -> Result<u64, ModelIoError> {
        let n = self
            .cursor
            .read_u64::<LE>()
            .map_err(|_| ModelIoError::MalformedHeader {
                path: self.path.to_path_buf(),
                detail: "missing record count".into(),
            })?;
        if n.saturating_mul(min_record_bytes) > self.remaining() {
            return Err(ModelIoError::Truncated {
                path: self.path.to_path_buf(),
                detail: format!("{n} records declared, {} bytes left", self.remaining()),
            });
        }
        Ok(n)
    }

    fn truncated(&self, what: &str) -> ModelIoError {
        ModelIoError::Truncated {
            path: self.path.to_path_buf(),
            detail: format!("while reading {what} at byte {}", self.cursor.position()),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelIoError> {
        self.cursor.read_u8().map_err(|_| self.truncated(what))
    }

    fn i32(&mut self, what: &str) -> Result<i32, ModelIoError> {
        self.cursor
            .read_i32::<LE>()
            .map_err(|_| self.truncated(what))
    }

    fn i64(&mut self, what: &str) -> Result<i64, ModelIoError> {
        self.cursor
            .read_i64::<LE>()
            .map_err(|_| self.truncated(what))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelIoError> {
        self.cursor
            .read_u64::<LE>()
            .map_err(|_| self.truncated(what))
    }

    fn f64(&mut self, what: &str) -> Result<f64, ModelIoError> {
        self.cursor
            .read_f64::<LE>()
            .map_err(|_| self.truncated(what))
    }

    fn vec3(&mut self, what: &str) -> Result<Vector3<f64>, ModelIoError> {
        Ok(Vector3::new(
            self.f64(what)?,
            self.f64(what)?,
            self.f64(what)?,
        ))
    }

    fn cstring(&mut self) -> Result<String, ModelIoError> {
        let mut bytes = Vec::new();
        loop {
            let b = self.u8("image name")?;
            if b == 0 {
                break;
            }
            bytes.push(b);
        }
        String::from_utf8(bytes).map_err(|_| ModelIoError::Parse {
            path: self.path.to_path_buf(),
            line: 0,
            detail: "image name is not UTF-8".into(),
        })
    }

    fn positive_id(&self, raw: i64, kind: &str) -> Result<u64, ModelIoError> {
        if raw <= 0 {
            return Err(ModelIoError::Parse {
                path: self.path.to_path_buf(),
                line: 0,
                detail: format!("non-positive {kind} id {raw}"),
            });
        }
        Ok(raw as u64)
    }

    fn finish(mut self) -> Result<(), ModelIoError> {
        let mut rest = Vec::new();
        let _ = self.cursor.read_to_end(&mut rest);
        if !rest.is_empty() {
            return Err(ModelIoError::Parse {
                path: self.path.to_path_buf(),
                line: 0,
                detail: format!("{} trailing bytes", rest.len()),
            });
        }
        Ok(())
    }

    fn duplicate(&self, kind: &str, id: u64) -> ModelIoError {
        ModelIoError::Parse {
            path: self.path.to_path_buf(),
            line: 0,
            detail: format!("duplicate {kind} id {id}"),
        }
    }
}

pub(super) fn read_cameras(path: &Path) -> Result<BTreeMap<CameraId, CameraRecord>, ModelIoError> {
    let mut r = Reader::open(path)?;
    let n = r.count(24)?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let id = {
            let raw = r.i32("camera id")?;
            r.positive_id(raw.into(), "camera")?
        } as CameraId;
        let model_id = r.i32("model id")?;
        let kind = CameraModelKind::from_id(model_id)
            .ok_or_else(|| ModelIoError::UnknownCameraModel(model_id.to_string()))?;
        let width = r.u64("width")?;
        let height = r.u64("height")?;
        let params = (0..kind.num_params())
            .map(|_| r.f64("camera params"))
            .collect::<Result<Vec<_>, _>>()?;
        let record = CameraRecord {
            camera_id: id,
            width,
            height,
            model: CameraModel { kind, params },
        };
        if out.insert(id, record).is_some() {
            return Err(r.duplicate("camera", id as u64));
        }
    }
    r.finish()?;
    Ok(out)
}

pub(super) fn read_images(path: &Path) -> Result<BTreeMap<ImageId, ImageRecord>, ModelIoError> {
    let mut r = Reader::open(path)?;
    let n = r.count(73)?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let id = {
            let raw = r.i32("image id")?;
            r.positive_id(raw.into(), "image")?
        } as ImageId;
        let q = [r.f64("qw")?, r.f64("qx")?, r.f64("qy")?, r.f64("qz")?];
        let t = r.vec3("translation")?;
        let camera_id = {
            let raw = r.i32("camera id")?;
            r.positive_id(raw.into(), "camera")?
        } as CameraId;
        let name = r.cstring()?;
        let num_obs = r.u64("observation count")?;
        if num_obs.saturating_mul(24) > r.remaining() {
            return Err(r.truncated("observations"));
        }
        let mut observations = Vec::with_capacity(num_obs as usize);
        for _ in 0..num_obs {
            let xy = Vector2::new(r.f64("x")?, r.f64("y")?);
            let raw = r.i64("point3D id")?;
            let point3d_id = if raw == -1 {
                None
            } else {
                Some(r.positive_id(raw, "point3D")?)
            };
            observations.push(ImageObservation { xy, point3d_id });
        }
        let record = ImageRecord {
            image_id: id,
            pose: Pose::new(raw_quaternion(q), t),
            camera_id,
            name,
            observations,
        };
        if out.insert(id, record).is_some() {
            return Err(r.duplicate("image", id as u64));
        }
    }
    r.finish()?;
    Ok(out)
}

/// Quaternion as stored; the norm is checked by validation rather than silently fixed.
pub(super) fn raw_quaternion(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::new_unchecked(Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub(super) fn read_points(path: &Path) -> Result<BTreeMap<PointId, Point3DRecord>, ModelIoError> {
    let mut r = Reader::open(path)?;
    let n = r.count(51)?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let id = {
            let raw = r.i64("point3D id")?;
            r.positive_id(raw, "point3D")?
        };
        let xyz = r.vec3("xyz")?;
        let rgb = [r.u8("rgb")?, r.u8("rgb")?, r.u8("rgb")?];
        let error = r.f64("error")?;
        let len = r.u64("track length")?;
        if len.saturating_mul(8) > r.remaining() {
            return Err(r.truncated("track"));
        }
        let mut track = Vec::with_capacity(len as usize);
        for _ in 0..len {
            let image_id = {
                let raw = r.i32("track image id")?;
                r.positive_id(raw.into(), "image")?
            };
            let obs_index = r.i32("track observation index")?;
            if obs_index < 0 {
                return Err(ModelIoError::Parse {
                    path: path.to_path_buf(),
                    line: 0,
                    detail: format!("negative observation index in point {id}"),
                });
            }
            track.push(TrackElement {
                image_id: image_id as ImageId,
                obs_index: obs_index as u32,
            });
        }
        let record = Point3DRecord {
            point3d_id: id,
            xyz,
            rgb,
            error,
            track,
        };
        if out.insert(id, record).is_some() {
            return Err(r.duplicate("point3D", id));
        }
    }
    r.finish()?;
    Ok(out)
}

// Writes into a Vec<u8> cannot fail.
pub(super) fn encode_cameras(model: &SparseModel) -> Vec<u8> {
    let mut w = Vec::new();
    w.write_u64::<LE>(model.cameras.len() as u64).unwrap();
    for cam in model.cameras.values() {
        w.write_i32::<LE>(cam.camera_id as i32).unwrap();
        w.write_i32::<LE>(cam.model.kind.id()).unwrap();
        w.write_u64::<LE>(cam.width).unwrap();
        w.write_u64::<LE>(cam.height).unwrap();
        for &p in &cam.model.params {
            w.write_f64::<LE>(p).unwrap();
        }
    }
    w
}

pub(super) fn encode_images(model: &SparseModel) -> Vec<u8> {
    let mut w = Vec::new();
    w.write_u64::<LE>(model.images.len() as u64).unwrap();
    for im in model.images.values() {
        w.write_i32::<LE>(im.image_id as i32).unwrap();
        for c in im.pose.wxyz() {
            w.write_f64::<LE>(c).unwrap();
        }
        for &c in im.pose.translation().iter() {
            w.write_f64::<LE>(c).unwrap();
        }
        w.write_i32::<LE>(im.camera_id as i32).unwrap();
        w.extend_from_slice(im.name.as_bytes());
        w.push(0);
        w.write_u64::<LE>(im.observations.len() as u64).unwrap();
        for obs in &im.observations {
            w.write_f64::<LE>(obs.xy.x).unwrap();
            w.write_f64::<LE>(obs.xy.y).unwrap();
            w.write_i64::<LE>(obs.point3d_id.map_or(-1, |id| id as i64))
                .unwrap();
        }
    }
    w
}

pub(super) fn encode_points(model: &SparseModel) -> Vec<u8> {
    let mut w = Vec::new();
    w.write_u64::<LE>(model.points.len() as u64).unwrap();
    for p in model.points.values() {
        w.write_i64::<LE>(p.point3d_id as i64).unwrap();
        for &c in p.xyz.iter() {
            w.write_f64::<LE>(c).unwrap();
        }
        w.extend_from_slice(&p.rgb);
        w.write_f64::<LE>(p.error).unwrap();
        w.write_u64::<LE>(p.track.len() as u64).unwrap();
        for el in &p.track {
            w.write_i32::<LE>(el.image_id as i32).unwrap();
            w.write_i32::<LE>(el.obs_index as i32).unwrap();
        }
    }
    w
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ModelIoError> {
    std::fs::write(path, bytes).map_err(|e| ModelIoError::io(path, e))
}

pub(super) fn write_cameras(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    write_bytes(path, &encode_cameras(model))
}

pub(super) fn write_images(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    write_bytes(path, &encode_images(model))
}

pub(super) fn write_points(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    write_bytes(path, &encode_points(model))
}

#[cfg(test)]
mod tests {
    use super::super::{read_model, write_model, ModelFormat};
    use super::*;

    fn write_empty(dir: &Path) {
        for f in ["cameras.bin", "images.bin", "points3D.bin"] {
            std::fs::write(dir.join(f), 0u64.to_le_bytes()).unwrap();
        }
    }

    #[test]
    fn empty_model() {
        let dir = tempfile::tempdir().unwrap();
        write_empty(dir.path());
        let m = read_model(dir.path(), ModelFormat::Binary).unwrap();
        assert!(m.cameras.is_empty() && m.images.is_empty() && m.points.is_empty());
    }

    #[test]
    fn hand_assembled_camera_file() {
        // u64 count=1 | i32 id=1 | i32 model=0 | u64 w=100 | u64 h=100 | f64 50, 50, 50
        let hex = "0100000000000000\
                   01000000\
                   00000000\
                   6400000000000000\
                   6400000000000000\
                   0000000000004940\
                   0000000000004940\
                   0000000000004940";
        let bytes: Vec<u8> = (0..hex.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&hex[i..i + 2], 16).unwrap())
            .collect();
        assert_eq!(f64::from_le_bytes(bytes[32..40].try_into().unwrap()), 50.0);
        let dir = tempfile::tempdir().unwrap();
        write_empty(dir.path());
        std::fs::write(dir.path().join("cameras.bin"), &bytes).unwrap();
        let m = read_model(dir.path(), ModelFormat::Binary).unwrap();
        let cam = &m.cameras[&1];
        assert_eq!(cam.width, 100);
        assert_eq!(cam.height, 100);
        assert_eq!(cam.model.kind, CameraModelKind::SimplePinhole);
        assert_eq!(cam.model.params, vec![50.0, 50.0, 50.0]);
        // And the encoder reproduces the same bytes.
        assert_eq!(encode_cameras(&m), bytes);
    }

    #[test]
    fn null_link_is_all_ones() {
        let m = super::super::tests::two_view_model();
        let bytes = encode_images(&m);
        // image 1: header 8 + id 4 + quat 32 + t 24 + cam 4 + "img_1.png\0" 10 + count 8
        let obs1 = 8 + 4 + 32 + 24 + 4 + 10 + 8 + 24;
        assert_eq!(&bytes[obs1 + 16..obs1 + 24], &[0xff; 8]);
        assert_eq!(&bytes[obs1 - 8..obs1], &7i64.to_le_bytes());
    }

    #[test]
    fn unknown_model_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        write_empty(dir.path());
        let mut bytes = 1u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(&1i32.to_le_bytes());
        bytes.extend_from_slice(&42i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(dir.path().join("cameras.bin"), &bytes).unwrap();
        assert!(matches!(
            read_model(dir.path(), ModelFormat::Binary),
            Err(ModelIoError::UnknownCameraModel(_))
        ));

        let m = super::super::tests::two_view_model();
        write_model(&m, dir.path(), ModelFormat::Binary).unwrap();
        let path = dir.path().join("images.bin");
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            read_model(dir.path(), ModelFormat::Binary),
            Err(ModelIoError::Truncated { .. })
        ));
        std::fs::write(&path, [1u8, 2, 3]).unwrap();
        assert!(matches!(
            read_model(dir.path(), ModelFormat::Binary),
            Err(ModelIoError::MalformedHeader { .. })
        ));
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_model(dir.path(), ModelFormat::Binary),
            Err(ModelIoError::MissingFile(_))
        ));
    }

    #[test]
    fn binary_roundtrip_is_byte_identical() {
        let m = super::super::tests::two_view_model();
        let dir = tempfile::tempdir().unwrap();
        write_model(&m, dir.path(), ModelFormat::Binary).unwrap();
        let back = read_model(dir.path(), ModelFormat::Binary).unwrap();
        assert_eq!(back, m);
        let again = tempfile::tempdir().unwrap();
        write_model(&back, again.path(), ModelFormat::Binary).unwrap();
        for f in ["cameras.bin", "images.bin", "points3D.bin"] {
            assert_eq!(
                std::fs::read(dir.path().join(f)).unwrap(),
                std::fs::read(again.path().join(f)).unwrap()
            );
        }
    }
}
