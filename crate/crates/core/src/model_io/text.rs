use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};

use super::binary::raw_quaternion;
use super::{
    CameraRecord, ImageObservation, ImageRecord, ModelIoError, Point3DRecord, SparseModel,
    TrackElement,
};
use crate::geometry::{CameraModel, CameraModelKind, Pose};
use crate::{CameraId, ImageId, PointId};

struct Line<'a> {
    path: &'a Path,
    number: usize,
    tokens: Vec<&'a str>,
    pos: usize,
}

impl<'a> Line<'a> {
    fn new(path: &'a Path, number: usize, text: &'a str) -> Self {
        Self {
            path,
            number,
            tokens: text.split_whitespace().collect(),
            pos: 0,
        }
    }

    fn err(&self, detail: impl Into<String>) -> ModelIoError {
        ModelIoError::Parse {
            path: self.path.to_path_buf(),
            line: self.number,
            detail: detail.into(),
        }
    }

    fn next_token(&mut self, what: &str) -> Result<&'a str, ModelIoError> {
        let tok = self
            .tokens
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err(format!("missing {what}")))?;
        self.pos += 1;
        Ok(tok)
    }

    fn parse<T: FromStr>(&mut self, what: &str) -> Result<T, ModelIoError> {
        let tok = self.next_token(what)?;
        tok.parse()
            .map_err(|_| self.err(format!("cannot parse {what} from '{tok}'")))
    }

    fn positive_id(&mut self, what: &str) -> Result<u64, ModelIoError> {
        let v: i64 = self.parse(what)?;
        if v <= 0 {
            return Err(self.err(format!("non-positive {what} {v}")));
        }
        Ok(v as u64)
    }

    fn remaining(&self) -> usize {
        self.tokens.len() - self.pos
    }

    fn done(&self) -> Result<(), ModelIoError> {
        if self.remaining() != 0 {
            return Err(self.err(format!("{} unexpected trailing tokens", self.remaining())));
        }
        Ok(())
    }
}

fn read_text(path: &Path) -> Result<String, ModelIoError> {
    std::fs::read_to_string(path).map_err(|e| ModelIoError::io(path, e))
}

fn data_lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| {
            let t = l.trim_start();
            !t.is_empty() && !t.starts_with('#')
        })
}

pub(super) fn read_cameras(path: &Path) -> Result<BTreeMap<CameraId, CameraRecord>, ModelIoError> {
    let content = read_text(path)?;
    let mut out = BTreeMap::new();
    for (number, text) in data_lines(&content) {
        let mut line = Line::new(path, number, text);
        let id = line.positive_id("camera id")? as CameraId;
        let name = line.next_token("camera model")?;
        let kind = CameraModelKind::from_name(name)
            .ok_or_else(|| ModelIoError::UnknownCameraModel(name.to_string()))?;
        let width = line.parse("width")?;
        let height = line.parse("height")?;
        let params = (0..kind.num_params())
            .map(|_| line.parse::<f64>("camera param"))
            .collect::<Result<Vec<_>, _>>()?;
        line.done()?;
        let record = CameraRecord {
            camera_id: id,
            width,
            height,
            model: CameraModel { kind, params },
        };
        if out.insert(id, record).is_some() {
            return Err(line.err(format!("duplicate camera id {id}")));
        }
    }
    Ok(out)
}

pub(super) fn read_images(path: &Path) -> Result<BTreeMap<ImageId, ImageRecord>, ModelIoError> {
    let content = read_text(path)?;
    let mut out = BTreeMap::new();
    // Two lines per image; the observation line may be empty, so only comment
    // lines are skipped once a header has been consumed.
    let mut lines = content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .peekable();
    while let Some((number, text)) = lines.next() {
        let trimmed = text.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut header = Line::new(path, number, text);
        let id = header.positive_id("image id")? as ImageId;
        let q = [
            header.parse::<f64>("qw")?,
            header.parse::<f64>("qx")?,
            header.parse::<f64>("qy")?,
            header.parse::<f64>("qz")?,
        ];
        let t = Vector3::new(
            header.parse::<f64>("tx")?,
            header.parse::<f64>("ty")?,
            header.parse::<f64>("tz")?,
        );
        let camera_id = header.positive_id("camera id")? as CameraId;
        let name = header.next_token("image name")?.to_string();
        header.done()?;

        while matches!(lines.peek(), Some((_, l)) if l.trim_start().starts_with('#')) {
            lines.next();
        }
        let mut observations = Vec::new();
        if let Some((obs_number, obs_text)) = lines.next() {
            let mut obs = Line::new(path, obs_number, obs_text);
            if !obs.remaining().is_multiple_of(3) {
                return Err(obs.err("observation line must hold (x, y, point3D id) triples"));
            }
            while obs.remaining() > 0 {
                let xy = Vector2::new(obs.parse::<f64>("x")?, obs.parse::<f64>("y")?);
                let raw: i64 = obs.parse("point3D id")?;
                let point3d_id = match raw {
                    -1 => None,
                    v if v > 0 => Some(v as PointId),
                    v => return Err(obs.err(format!("invalid point3D id {v}"))),
                };
                observations.push(ImageObservation { xy, point3d_id });
            }
        }
        let record = ImageRecord {
            image_id: id,
            pose: Pose::new(raw_quaternion(q), t),
            camera_id,
            name,
            observations,
        };
        if out.insert(id, record).is_some() {
            return Err(header.err(format!("duplicate image id {id}")));
        }
    }
    Ok(out)
}

pub(super) fn read_points(path: &Path) -> Result<BTreeMap<PointId, Point3DRecord>, ModelIoError> {
    let content = read_text(path)?;
    let mut out = BTreeMap::new();
    for (number, text) in data_lines(&content) {
        let mut line = Line::new(path, number, text);
        let id = line.positive_id("point3D id")?;
        let xyz = Vector3::new(
            line.parse::<f64>("x")?,
            line.parse::<f64>("y")?,
            line.parse::<f64>("z")?,
        );
        let rgb = [
            line.parse::<u8>("r")?,
            line.parse::<u8>("g")?,
            line.parse::<u8>("b")?,
        ];
        let error = line.parse::<f64>("error")?;
        if !line.remaining().is_multiple_of(2) {
            return Err(line.err("track must hold (image id, observation index) pairs"));
        }
        let mut track = Vec::with_capacity(line.remaining() / 2);
        while line.remaining() > 0 {
            let image_id = line.positive_id("track image id")? as ImageId;
            let obs_index: u32 = line.parse("track observation index")?;
            track.push(TrackElement {
                image_id,
                obs_index,
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
            return Err(line.err(format!("duplicate point3D id {id}")));
        }
    }
    Ok(out)
}

// `{:?}` on f64 prints the shortest decimal that parses back to the same bits.
fn push_f64(out: &mut String, v: f64) {
    write!(out, " {v:?}").unwrap();
}

fn write_text(path: &Path, content: &str) -> Result<(), ModelIoError> {
    std::fs::write(path, content).map_err(|e| ModelIoError::io(path, e))
}

pub(super) fn write_cameras(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    let mut out = String::new();
    out.push_str("# Camera list with one line of data per camera:\n");
    out.push_str("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    writeln!(out, "# Number of cameras: {}", model.cameras.len()).unwrap();
    for cam in model.cameras.values() {
        write!(
            out,
            "{} {} {} {}",
            cam.camera_id, cam.model.kind, cam.width, cam.height
        )
        .unwrap();
        for &p in &cam.model.params {
            push_f64(&mut out, p);
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub(super) fn write_images(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    for im in model.images.values() {
        if im.name.chars().any(char::is_whitespace) {
            return Err(ModelIoError::Invariant(format!(
                "image name '{}' contains whitespace and cannot be written as text",
                im.name
            )));
        }
    }
    let mut out = String::new();
    out.push_str("# Image list with two lines of data per image:\n");
    out.push_str("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n");
    out.push_str("#   POINTS2D[] as (X, Y, POINT3D_ID)\n");
    let mean_obs = if model.images.is_empty() {
        0.0
    } else {
        model.images.values().map(|i| i.num_linked()).sum::<usize>() as f64
            / model.images.len() as f64
    };
    writeln!(
        out,
        "# Number of images: {}, mean observations per image: {mean_obs}",
        model.images.len()
    )
    .unwrap();
    for im in model.images.values() {
        write!(out, "{}", im.image_id).unwrap();
        for c in im.pose.wxyz() {
            push_f64(&mut out, c);
        }
        for &c in im.pose.translation().iter() {
            push_f64(&mut out, c);
        }
        writeln!(out, " {} {}", im.camera_id, im.name).unwrap();
        let mut first = true;
        for obs in &im.observations {
            if !first {
                out.push(' ');
            }
            first = false;
            let id = obs.point3d_id.map_or(-1, |v| v as i64);
            write!(out, "{:?} {:?} {id}", obs.xy.x, obs.xy.y).unwrap();
        }
        out.push('\n');
    }
    write_text(path, &out)
}

pub(super) fn write_points(model: &SparseModel, path: &Path) -> Result<(), ModelIoError> {
    let mut out = String::new();
    out.push_str("# 3D point list with one line of data per point:\n");
    out.push_str("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n");
    let mean_track = if model.points.is_empty() {
        0.0
    } else {
        model.num_linked_observations() as f64 / model.points.len() as f64
    };
    writeln!(
        out,
        "# Number of points: {}, mean track length: {mean_track}",
        model.points.len()
    )
    .unwrap();
    for p in model.points.values() {
        write!(out, "{}", p.point3d_id).unwrap();
        for &c in p.xyz.iter() {
            push_f64(&mut out, c);
        }
        write!(out, " {} {} {}", p.rgb[0], p.rgb[1], p.rgb[2]).unwrap();
        push_f64(&mut out, p.error);
        for el in &p.track {
            write!(out, " {} {}", el.image_id, el.obs_index).unwrap();
        }
        out.push('\n');
    }
    write_text(path, &out)
}
