//! Pose evaluation against ground truth: similarity alignment of camera
//! centers, per-view errors, and pooled accuracy at thresholds.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rotation_error_deg, Pose};
use crate::model_io::SparseModel;
use crate::rng::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("alignment needs at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("correspondence lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("degenerate alignment: camera centers are (nearly) collinear or coincident")]
    Degenerate,
    #[error("estimate and ground truth share no image names")]
    NoOverlap,
    #[error("no ground-truth views to evaluate")]
    NoViews,
    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),
    #[error("empty threshold list")]
    EmptyThresholds,
}

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x * self.scale + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.inverse();
        Self {
            scale: 1.0 / self.scale,
            rotation,
            translation: -(rotation * self.translation) / self.scale,
        }
    }

    /// `self` after `other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.apply(&other.translation),
        }
    }

    /// The same camera expressed in the transformed world frame.
    pub fn apply_pose(&self, pose: &Pose) -> Pose {
        let rotation = pose.rotation() * self.rotation.inverse();
        Pose::from_center(rotation, &self.apply(&pose.center()))
    }

    /// Transforms every pose and point of a model.
    pub fn apply_model(&self, model: &SparseModel) -> SparseModel {
        let mut out = model.clone();
        for image in out.images.values_mut() {
            image.pose = self.apply_pose(&image.pose);
        }
        for p in out.points.values_mut() {
            p.xyz = self.apply(&p.xyz);
        }
        out
    }
}

/// Least-squares similarity (or rigid transform) mapping `est` onto `gt`.
pub fn align_umeyama(
    est: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    with_scale: bool,
) -> Result<SimilarityTransform, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    let n = est.len();
    if n < 3 {
        return Err(EvalError::TooFewCorrespondences(n));
    }
    let mean = |v: &[Vector3<f64>]| v.iter().sum::<Vector3<f64>>() / n as f64;
    let (mx, my) = (mean(est), mean(gt));
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in est.iter().zip(gt) {
        let (dx, dy) = (x - mx, y - my);
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n as f64;
    var_x /= n as f64;

    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(EvalError::Degenerate);
    }
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        // Flip the direction of the smallest singular value.
        let (k, _) =
            svd.singular_values
                .iter()
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc },
                );
        s[(k, k)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = if with_scale {
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_x
    } else {
        1.0
    };
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation: my - rotation * mx * scale,
    })
}

/// RANSAC over 3-point Umeyama fits; the best consensus set is refit.
/// Returns the transform and the inlier mask.
pub fn align_umeyama_ransac(
    est: &[Vector3<f64>],
    gt: &[Vector3<f64>],
    with_scale: bool,
    inlier_threshold: f64,
    iterations: usize,
    seed: u64,
) -> Result<(SimilarityTransform, Vec<bool>), EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    let n = est.len();
    if n < 3 {
        return Err(EvalError::TooFewCorrespondences(n));
    }
    let mask_for = |t: &SimilarityTransform| -> Vec<bool> {
        est.iter()
            .zip(gt)
            .map(|(x, y)| (t.apply(x) - y).norm() < inlier_threshold)
            .collect()
    };
    let mut rng = SplitMix64::new(seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    for _ in 0..iterations {
        let idx = sample(&mut rng, n, 3);
        let xs: Vec<_> = idx.iter().map(|i| est[i]).collect();
        let ys: Vec<_> = idx.iter().map(|i| gt[i]).collect();
        let Ok(t) = align_umeyama(&xs, &ys, with_scale) else {
            continue;
        };
        let mask = mask_for(&t);
        let count = mask.iter().filter(|&&m| m).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, mask));
        }
    }
    let (_, mask) = best.ok_or(EvalError::Degenerate)?;
    let xs: Vec<_> = est
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| *x)
        .collect();
    let ys: Vec<_> = gt
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(y, _)| *y)
        .collect();
    let t = align_umeyama(&xs, &ys, with_scale)?;
    let mask = mask_for(&t);
    Ok((t, mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewError {
    pub name: String,
    pub rotation_error_deg: f64,
    pub position_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseErrorReport {
    pub registered: Vec<ViewError>,
    /// Ground-truth views without an estimate.
    pub unregistered: Vec<String>,
}

impl PoseErrorReport {
    pub fn total_views(&self) -> usize {
        self.registered.len() + self.unregistered.len()
    }
}

/// Camera centers of the views present in both models, matched by name.
pub fn common_centers(
    est: &SparseModel,
    gt: &SparseModel,
) -> (Vec<String>, Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let est_by_name: BTreeMap<&str, &Pose> = est
        .images
        .values()
        .map(|im| (im.name.as_str(), &im.pose))
        .collect();
    let mut names = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for im in gt.images.values() {
        if let Some(p) = est_by_name.get(im.name.as_str()) {
            names.push(im.name.clone());
            xs.push(p.center());
            ys.push(im.pose.center());
        }
    }
    (names, xs, ys)
}

pub fn pose_errors(
    est: &SparseModel,
    gt: &SparseModel,
    transform: &SimilarityTransform,
) -> Result<PoseErrorReport, EvalError> {
    let est_by_name: BTreeMap<&str, &Pose> = est
        .images
        .values()
        .map(|im| (im.name.as_str(), &im.pose))
        .collect();
    let mut report = PoseErrorReport::default();
    for im in gt.images.values() {
        match est_by_name.get(im.name.as_str()) {
            Some(p) => {
                let aligned = p.rotation() * transform.rotation.inverse();
                report.registered.push(ViewError {
                    name: im.name.clone(),
                    rotation_error_deg: rotation_error_deg(&aligned, im.pose.rotation()),
                    position_error: (transform.apply(&p.center()) - im.pose.center()).norm(),
                });
            }
            None => report.unregistered.push(im.name.clone()),
        }
    }
    if report.registered.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    Ok(report)
}

/// Aligns `est` to `gt` on the shared camera centers, then reports errors.
pub fn evaluate(
    est: &SparseModel,
    gt: &SparseModel,
    with_scale: bool,
) -> Result<(SimilarityTransform, PoseErrorReport), EvalError> {
    let (names, xs, ys) = common_centers(est, gt);
    if names.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let t = align_umeyama(&xs, &ys, with_scale)?;
    Ok((t, pose_errors(est, gt, &t)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyMode {
    /// Passing views over all ground-truth views of all scenes.
    #[default]
    Pooled,
    /// Mean of the per-scene percentages.
    PerSceneMean,
}

fn check_threshold(t: f64) -> Result<(), EvalError> {
    if t >= 0.0 {
        Ok(())
    } else {
        Err(EvalError::InvalidThreshold(t))
    }
}

fn passing(report: &PoseErrorReport, rot: f64, pos: f64) -> usize {
    report
        .registered
        .iter()
        .filter(|v| v.rotation_error_deg < rot && v.position_error < pos)
        .count()
}

/// Percentage of views with rotation error below `rot_thresh_deg` and
/// position error below `pos_thresh`, unregistered views counting as failures.
pub fn accuracy_at(
    reports: &[PoseErrorReport],
    rot_thresh_deg: f64,
    pos_thresh: f64,
) -> Result<f64, EvalError> {
    accuracy_at_with(reports, rot_thresh_deg, pos_thresh, AccuracyMode::Pooled)
}

pub fn accuracy_at_with(
    reports: &[PoseErrorReport],
    rot_thresh_deg: f64,
    pos_thresh: f64,
    mode: AccuracyMode,
) -> Result<f64, EvalError> {
    check_threshold(rot_thresh_deg)?;
    check_threshold(pos_thresh)?;
    let total: usize = reports.iter().map(PoseErrorReport::total_views).sum();
    if total == 0 {
        return Err(EvalError::NoViews);
    }
    match mode {
        AccuracyMode::Pooled => {
            let num: usize = reports
                .iter()
                .map(|r| passing(r, rot_thresh_deg, pos_thresh))
                .sum();
            Ok(100.0 * num as f64 / total as f64)
        }
        AccuracyMode::PerSceneMean => {
            let scenes: Vec<f64> = reports
                .iter()
                .filter(|r| r.total_views() > 0)
                .map(|r| {
                    100.0 * passing(r, rot_thresh_deg, pos_thresh) as f64 / r.total_views() as f64
                })
                .collect();
            Ok(scenes.iter().sum::<f64>() / scenes.len() as f64)
        }
    }
}

/// [`accuracy_at`] at a fixed rotation threshold over several position thresholds.
pub fn accuracy_curve(
    reports: &[PoseErrorReport],
    rot_thresh_deg: f64,
    pos_thresholds: &[f64],
) -> Result<Vec<(f64, f64)>, EvalError> {
    if pos_thresholds.is_empty() {
        return Err(EvalError::EmptyThresholds);
    }
    pos_thresholds
        .iter()
        .map(|&t| accuracy_at(reports, rot_thresh_deg, t).map(|a| (t, a)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn view(name: &str, rot: f64, pos: f64) -> ViewError {
        ViewError {
            name: name.into(),
            rotation_error_deg: rot,
            position_error: pos,
        }
    }

    fn five_views() -> Vec<PoseErrorReport> {
        vec![
            PoseErrorReport {
                registered: vec![
                    view("a", 0.5, 0.01),
                    view("b", 2.0, 0.01),
                    view("c", 0.5, 0.10),
                    view("d", 0.5, 0.02),
                ],
                unregistered: vec![],
            },
            PoseErrorReport {
                registered: vec![],
                unregistered: vec!["e".into()],
            },
        ]
    }

    #[test]
    fn five_view_accuracy() {
        let r = five_views();
        assert_eq!(accuracy_at(&r, 1.0, 0.05).unwrap(), 40.0);
        assert_eq!(accuracy_at(&r, 5.0, 0.10).unwrap(), 60.0);
        assert_eq!(
            accuracy_curve(&r, 5.0, &[0.05, 0.10]).unwrap(),
            vec![(0.05, 60.0), (0.10, 60.0)]
        );
        assert_eq!(accuracy_at(&r, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn per_scene_mean_differs_from_pooled() {
        let r = five_views();
        assert_eq!(
            accuracy_at_with(&r, 1.0, 0.05, AccuracyMode::PerSceneMean).unwrap(),
            25.0
        );
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(accuracy_at(&[], 1.0, 1.0), Err(EvalError::NoViews));
        assert_eq!(
            accuracy_curve(&five_views(), 1.0, &[]),
            Err(EvalError::EmptyThresholds)
        );
        assert!(accuracy_at(&five_views(), -1.0, 1.0).is_err());
        let p = [Vector3::zeros(), Vector3::x(), Vector3::x() * 2.0];
        assert_eq!(align_umeyama(&p, &p, true), Err(EvalError::Degenerate));
        assert_eq!(
            align_umeyama(&p[..2], &p[..2], true),
            Err(EvalError::TooFewCorrespondences(2))
        );
    }

    #[test]
    fn identity_alignment() {
        let p = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 2.0, 0.0),
            Vector3::new(0.0, 0.0, 3.0),
        ];
        let t = align_umeyama(&p, &p, true).unwrap();
        assert!((t.scale - 1.0).abs() < 1e-12);
        assert!(t.rotation.angle() < 1e-12);
        assert!(t.translation.norm() < 1e-12);
    }
}
