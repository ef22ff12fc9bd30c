//! Deterministic synthetic scenes with known poses, points and correspondences.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Unit, UnitQuaternion, Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{project, reprojection_error, rotation_error_deg, CameraModel, Pose};
use crate::matching::{Match, MatchGraph};
use crate::model_io::{
    CameraRecord, FeatureSet, ImageObservation, ImageRecord, Point3DRecord, SparseModel,
    TrackElement,
};
use crate::rng::SplitMix64;
use crate::{ImageId, PointId};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("impossible layout: {0}")]
    ImpossibleLayout(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    #[default]
    Ring,
    Line,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_cameras: usize,
    pub n_points: usize,
    pub layout: Layout,
    /// Radius of the ball the points are drawn from.
    pub scene_radius: f64,
    /// Distance of the camera layout from the scene center.
    pub camera_distance: f64,
    pub camera: CameraModel,
    pub width: u64,
    pub height: u64,
    pub pixel_noise_sigma: f64,
    pub rot_noise_deg: f64,
    pub pos_noise_frac: f64,
    pub outlier_fraction: f64,
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cameras: 12,
            n_points: 300,
            layout: Layout::Ring,
            scene_radius: 1.0,
            camera_distance: 4.0,
            camera: CameraModel::simple_pinhole(500.0, 320.0, 240.0),
            width: 640,
            height: 480,
            pixel_noise_sigma: 0.0,
            rot_noise_deg: 0.0,
            pos_noise_frac: 0.0,
            outlier_fraction: 0.0,
            descriptor_dim: 64,
            descriptor_noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_cameras < 2 {
            return bad(format!("need at least 2 cameras, got {}", self.n_cameras));
        }
        if self.n_points < 8 {
            return bad(format!("need at least 8 points, got {}", self.n_points));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad(format!(
                "outlier_fraction {} not in [0, 1)",
                self.outlier_fraction
            ));
        }
        for (name, v) in [
            ("scene_radius", self.scene_radius),
            ("camera_distance", self.camera_distance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("pixel_noise_sigma", self.pixel_noise_sigma),
            ("rot_noise_deg", self.rot_noise_deg),
            ("pos_noise_frac", self.pos_noise_frac),
            ("descriptor_noise", self.descriptor_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.descriptor_dim == 0 || self.width == 0 || self.height == 0 {
            return bad("descriptor_dim, width and height must be positive".into());
        }
        if self.camera_distance <= self.scene_radius {
            return Err(SynthError::ImpossibleLayout(
                "cameras would sit inside the point cloud".into(),
            ));
        }
        self.camera
            .validate()
            .map_err(|e| SynthError::InvalidConfig(e.to_string()))
    }
}

/// A generated scene and its ground truth.
#[derive(Debug, Clone)]
pub struct SynthScene {
    /// True poses and points. Observation `k` of an image is keypoint `k` of
    /// its feature set; outlier keypoints are left unlinked.
    pub gt_model: SparseModel,
    /// `gt_model` with poses perturbed by `rot_noise_deg` / `pos_noise_frac`.
    pub initial_model: SparseModel,
    pub features: BTreeMap<ImageId, FeatureSet>,
    /// Every correspondence implied by the descriptors, outliers included.
    pub true_matches: MatchGraph,
    /// Keypoints whose location was replaced by a random pixel.
    pub outliers: BTreeSet<(ImageId, u32)>,
}

impl SynthScene {
    pub fn is_outlier_match(&self, a: ImageId, b: ImageId, m: &Match) -> bool {
        self.outliers.contains(&(a, m.idx_a)) || self.outliers.contains(&(b, m.idx_b))
    }
}

const STREAM_POINTS: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_OUTLIERS: u64 = 4;
const STREAM_DESCRIPTORS: u64 = 5;
const STREAM_PERTURB: u64 = 6;

fn layout_poses(cfg: &SynthConfig) -> Result<Vec<Pose>, SynthError> {
    let n = cfg.n_cameras;
    let d = cfg.camera_distance;
    let target = Vector3::zeros();
    let eyes_up: Vec<(Vector3<f64>, Vector3<f64>)> = match cfg.layout {
        Layout::Ring => (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                (
                    Vector3::new(d * a.cos(), d * a.sin(), 0.2 * d * (2.0 * a).sin()),
                    Vector3::z(),
                )
            })
            .collect(),
        Layout::Line => (0..n)
            .map(|i| {
                let x = -d + 2.0 * d * i as f64 / (n - 1) as f64;
                (Vector3::new(x, -d, 0.1 * d), Vector3::z())
            })
            .collect(),
        Layout::Grid => {
            let side = (n as f64).sqrt().ceil() as usize;
            let step = if side > 1 { d / (side - 1) as f64 } else { 0.0 };
            (0..n)
                .map(|i| {
                    let (r, c) = (i / side, i % side);
                    (
                        Vector3::new(-0.5 * d + step * c as f64, -0.5 * d + step * r as f64, -d),
                        Vector3::y(),
                    )
                })
                .collect()
        }
    };
    eyes_up
        .iter()
        .map(|(eye, up)| {
            Pose::look_at(eye, &target, up).ok_or_else(|| {
                SynthError::ImpossibleLayout("camera looks along its up vector".into())
            })
        })
        .collect()
}

fn in_image(px: &Vector2<f64>, width: u64, height: u64) -> bool {
    px.x >= 0.0 && px.y >= 0.0 && px.x < width as f64 && px.y < height as f64
}

fn random_unit(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn image_name(image_id: ImageId) -> String {
    format!("img_{image_id:04}.png")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthScene, SynthError> {
    cfg.validate()?;
    let poses = layout_poses(cfg)?;
    let cam = &cfg.camera;

    // Points uniform in the ball, kept when at least two cameras see them.
    let mut rng = SplitMix64::fork(cfg.seed, STREAM_POINTS);
    let mut points: Vec<(Vector3<f64>, Vec<(usize, Vector2<f64>)>)> = Vec::new();
    let max_attempts = 200 * cfg.n_points;
    let mut attempts = 0;
    while points.len() < cfg.n_points {
        attempts += 1;
        if attempts > max_attempts {
            return Err(SynthError::ImpossibleLayout(format!(
                "only {} of {} points are visible in two views",
                points.len(),
                cfg.n_points
            )));
        }
        let p = loop {
            let v = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm_squared() <= 1.0 {
                break v * cfg.scene_radius;
            }
        };
        let views: Vec<(usize, Vector2<f64>)> = poses
            .iter()
            .enumerate()
            .filter_map(|(c, pose)| {
                let proj = project(cam, pose, &p);
                (!proj.is_behind() && in_image(&proj.pixel, cfg.width, cfg.height))
                    .then_some((c, proj.pixel))
            })
            .collect();
        if views.len() >= 2 {
            points.push((p, views));
        }
    }

    // Noisy observations, grouped per image then shuffled.
    let mut noise_rng = SplitMix64::fork(cfg.seed, STREAM_NOISE);
    let pixel_noise = Normal::new(0.0, cfg.pixel_noise_sigma).expect("sigma validated");
    let mut per_image: Vec<Vec<(usize, Vector2<f64>)>> = vec![Vec::new(); poses.len()];
    for (pi, (_, views)) in points.iter().enumerate() {
        for &(c, px) in views {
            let noisy = px
                + Vector2::new(
                    pixel_noise.sample(&mut noise_rng),
                    pixel_noise.sample(&mut noise_rng),
                );
            per_image[c].push((pi, noisy));
        }
    }
    let mut shuffle_rng = SplitMix64::fork(cfg.seed, STREAM_SHUFFLE);
    for obs in &mut per_image {
        obs.shuffle(&mut shuffle_rng);
    }

    // Outliers: replace a keypoint location while keeping its descriptor,
    // never leaving a point with fewer than two true observations.
    let mut outlier_rng = SplitMix64::fork(cfg.seed, STREAM_OUTLIERS);
    let mut inliers_left: Vec<usize> = points.iter().map(|(_, v)| v.len()).collect();
    let mut outliers = BTreeSet::new();
    if cfg.outlier_fraction > 0.0 {
        for (c, obs) in per_image.iter_mut().enumerate() {
            for (k, (pi, xy)) in obs.iter_mut().enumerate() {
                if outlier_rng.random::<f64>() >= cfg.outlier_fraction || inliers_left[*pi] <= 2 {
                    continue;
                }
                let moved = loop {
                    let cand = Vector2::new(
                        outlier_rng.random_range(0.0..cfg.width as f64),
                        outlier_rng.random_range(0.0..cfg.height as f64),
                    );
                    if (cand - *xy).norm() > 20.0 {
                        break cand;
                    }
                };
                *xy = moved;
                inliers_left[*pi] -= 1;
                outliers.insert((c as ImageId + 1, k as u32));
            }
        }
    }

    // Descriptors: one random unit code per point plus per-observation noise.
    let mut desc_rng = SplitMix64::fork(cfg.seed, STREAM_DESCRIPTORS);
    let codes: Vec<Vec<f64>> = (0..points.len())
        .map(|_| random_unit(&mut desc_rng, cfg.descriptor_dim))
        .collect();
    let desc_noise = Normal::new(0.0, cfg.descriptor_noise).expect("sigma validated");
    let mut features = BTreeMap::new();
    for (c, obs) in per_image.iter().enumerate() {
        let id = c as ImageId + 1;
        let mut desc = Vec::with_capacity(obs.len() * cfg.descriptor_dim);
        for (pi, _) in obs {
            for &x in &codes[*pi] {
                desc.push((x + desc_noise.sample(&mut desc_rng)) as f32);
            }
        }
        let kps = obs.iter().map(|(_, xy)| *xy).collect();
        let fs = FeatureSet::new(image_name(id), kps, cfg.descriptor_dim, desc)
            .expect("shapes are consistent");
        features.insert(id, fs);
    }

    let mut model = SparseModel::new();
    model.cameras.insert(
        1,
        CameraRecord {
            camera_id: 1,
            width: cfg.width,
            height: cfg.height,
            model: cam.clone(),
        },
    );
    for (c, pose) in poses.iter().enumerate() {
        let id = c as ImageId + 1;
        model.images.insert(
            id,
            ImageRecord {
                image_id: id,
                pose: *pose,
                camera_id: 1,
                name: image_name(id),
                observations: per_image[c]
                    .iter()
                    .map(|(_, xy)| ImageObservation::unlinked(*xy))
                    .collect(),
            },
        );
    }

    let mut tracks: Vec<Vec<TrackElement>> = vec![Vec::new(); points.len()];
    for (c, obs) in per_image.iter().enumerate() {
        let id = c as ImageId + 1;
        for (k, (pi, _)) in obs.iter().enumerate() {
            if !outliers.contains(&(id, k as u32)) {
                tracks[*pi].push(TrackElement {
                    image_id: id,
                    obs_index: k as u32,
                });
            }
        }
    }
    let mut color_rng = SplitMix64::fork(cfg.seed, STREAM_POINTS + 100);
    for (pi, track) in tracks.into_iter().enumerate() {
        let xyz = points[pi].0;
        let error = track
            .iter()
            .map(|el| {
                let im = &model.images[&el.image_id];
                reprojection_error(
                    cam,
                    &im.pose,
                    &xyz,
                    &im.observations[el.obs_index as usize].xy,
                )
            })
            .sum::<f64>()
            / track.len() as f64;
        model.insert_point(Point3DRecord {
            point3d_id: pi as PointId + 1,
            xyz,
            rgb: [color_rng.random(), color_rng.random(), color_rng.random()],
            error,
            track,
        });
    }

    // Ground-truth correspondences between every pair of images.
    let mut where_seen: Vec<Vec<(ImageId, u32)>> = vec![Vec::new(); points.len()];
    for (c, obs) in per_image.iter().enumerate() {
        for (k, (pi, _)) in obs.iter().enumerate() {
            where_seen[*pi].push((c as ImageId + 1, k as u32));
        }
    }
    let mut true_matches = MatchGraph::default();
    for seen in &where_seen {
        for (x, &(a, ka)) in seen.iter().enumerate() {
            for &(b, kb) in &seen[x + 1..] {
                let da = features[&a].descriptor(ka as usize);
                let db = features[&b].descriptor(kb as usize);
                let distance = da
                    .iter()
                    .zip(db)
                    .map(|(p, q)| ((p - q) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                true_matches.pairs.entry((a, b)).or_default().push(Match {
                    idx_a: ka,
                    idx_b: kb,
                    distance,
                });
            }
        }
    }
    for m in true_matches.pairs.values_mut() {
        m.sort_by_key(|m| m.idx_a);
    }

    let perturb_seed = SplitMix64::fork(cfg.seed, STREAM_PERTURB).random::<u64>();
    let initial_model = perturb_poses(&model, cfg.rot_noise_deg, cfg.pos_noise_frac, perturb_seed);
    Ok(SynthScene {
        gt_model: model,
        initial_model,
        features,
        true_matches,
        outliers,
    })
}

/// Largest distance between two camera centers.
pub fn scene_diameter(model: &SparseModel) -> f64 {
    let centers: Vec<Vector3<f64>> = model.images.values().map(|im| im.pose.center()).collect();
    let mut best = 0.0f64;
    for i in 0..centers.len() {
        for j in i + 1..centers.len() {
            best = best.max((centers[i] - centers[j]).norm());
        }
    }
    best
}

/// The noise actually applied to one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectedNoise {
    pub image_id: ImageId,
    pub rotation_deg: f64,
    pub center_offset: f64,
}

/// Composes each rotation with a random-axis rotation of Gaussian angle
/// (`sigma = rot_noise_deg`) and shifts each center by isotropic Gaussian
/// noise with `sigma = pos_noise_frac * scene_diameter`.
pub fn perturb_poses(
    model: &SparseModel,
    rot_noise_deg: f64,
    pos_noise_frac: f64,
    seed: u64,
) -> SparseModel {
    perturb_poses_detailed(model, rot_noise_deg, pos_noise_frac, seed).0
}

pub fn perturb_poses_detailed(
    model: &SparseModel,
    rot_noise_deg: f64,
    pos_noise_frac: f64,
    seed: u64,
) -> (SparseModel, Vec<InjectedNoise>) {
    let mut out = model.clone();
    let mut report = Vec::with_capacity(model.images.len());
    let pos_sigma = pos_noise_frac * scene_diameter(model);
    let mut rng = SplitMix64::new(seed);
    for (&id, image) in out.images.iter_mut() {
        let axis: Vector3<f64> = Vector3::from_fn(|_, _| rng.sample(StandardNormal));
        let angle: f64 = rng.sample::<f64, _>(StandardNormal) * rot_noise_deg;
        let offset: Vector3<f64> =
            Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal) * pos_sigma);
        if rot_noise_deg == 0.0 && pos_sigma == 0.0 {
            report.push(InjectedNoise {
                image_id: id,
                rotation_deg: 0.0,
                center_offset: 0.0,
            });
            continue;
        }
        let delta = Unit::try_new(axis, 1e-12)
            .map(|a| UnitQuaternion::from_axis_angle(&a, angle.to_radians()))
            .unwrap_or_else(UnitQuaternion::identity);
        let rotation = image.pose.rotation() * delta;
        let center = image.pose.center() + offset;
        let pose = Pose::from_center(rotation, &center);
        report.push(InjectedNoise {
            image_id: id,
            rotation_deg: rotation_error_deg(image.pose.rotation(), pose.rotation()),
            center_offset: (pose.center() - image.pose.center()).norm(),
        });
        image.pose = pose;
    }
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_io::encode_binary;

    fn small() -> SynthConfig {
        SynthConfig {
            n_cameras: 6,
            n_points: 60,
            pixel_noise_sigma: 0.5,
            outlier_fraction: 0.1,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(
            encode_binary(&a.gt_model).unwrap(),
            encode_binary(&b.gt_model).unwrap()
        );
        assert_eq!(a.features, b.features);
        assert_eq!(a.true_matches, b.true_matches);
        let c = generate(&SynthConfig {
            seed: 43,
            ..small()
        })
        .unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn generated_models_validate() {
        for layout in [Layout::Ring, Layout::Line, Layout::Grid] {
            let s = generate(&SynthConfig { layout, ..small() }).unwrap();
            s.gt_model.validate().unwrap();
            assert_eq!(s.gt_model.points.len(), 60);
            assert!(!s.outliers.is_empty());
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(generate(&SynthConfig {
            n_cameras: 1,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            n_points: 7,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            outlier_fraction: 1.0,
            ..small()
        })
        .is_err());
        assert!(generate(&SynthConfig {
            camera_distance: 0.5,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let s = generate(&small()).unwrap();
        assert_eq!(perturb_poses(&s.gt_model, 0.0, 0.0, 9), s.gt_model);
    }

    #[test]
    fn injected_noise_is_reported_exactly() {
        let s = generate(&small()).unwrap();
        let (p, report) = perturb_poses_detailed(&s.gt_model, 3.0, 0.05, 5);
        for r in report {
            let a = &s.gt_model.images[&r.image_id].pose;
            let b = &p.images[&r.image_id].pose;
            assert!((rotation_error_deg(a.rotation(), b.rotation()) - r.rotation_deg).abs() < 1e-9);
            assert!(((a.center() - b.center()).norm() - r.center_offset).abs() < 1e-9);
        }
    }
}
