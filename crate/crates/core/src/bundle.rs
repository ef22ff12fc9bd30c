//! Robust bundle adjustment of poses, intrinsics and points.
//!
//! Levenberg-Marquardt on the reprojection residual. Each iteration eliminates
//! the 3x3 point blocks (Schur complement) and solves the reduced camera
//! system with a dense Cholesky factorization.
//!
//! Pose increments are `[w; dt]` applied on the left in the camera frame:
//! `R <- exp([w]x) R`, `t <- exp([w]x) t + dt`.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{
    DMatrix, DVector, Matrix2, Matrix2x3, Matrix2xX, Matrix3, RowVector3, SMatrix, UnitQuaternion,
    Vector2, Vector3,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, CameraModelKind, Pose};
use crate::model_io::SparseModel;
use crate::{CameraId, ImageId, PointId};

/// Residual reported per component for an observation behind its camera.
pub const BEHIND_CAMERA_RESIDUAL: f64 = 1e4;
/// Damping escalation beyond this value ends the solve as stalled.
pub const MAX_DAMPING: f64 = 1e10;
const MIN_DIAGONAL: f64 = 1e-6;
const MAX_DIAGONAL: f64 = 1e32;

#[derive(Debug, Error, PartialEq)]
pub enum BundleError {
    #[error("invalid bundle adjustment options: {0}")]
    InvalidOptions(String),
    #[error("bundle adjustment needs at least 2 images with observations, got {0}")]
    TooFewImages(usize),
    #[error("point {point} is observed by unknown image {image}")]
    UnknownImage { point: PointId, image: ImageId },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum RobustLoss {
    None,
    Huber { delta_px: f64 },
}

impl Default for RobustLoss {
    fn default() -> Self {
        RobustLoss::Huber { delta_px: 1.0 }
    }
}

impl RobustLoss {
    /// `rho(e)` for a residual of norm `e`; equals `e^2` in the quadratic region.
    pub fn rho(&self, e: f64) -> f64 {
        match *self {
            RobustLoss::None => e * e,
            RobustLoss::Huber { delta_px } if e <= delta_px => e * e,
            RobustLoss::Huber { delta_px } => 2.0 * delta_px * e - delta_px * delta_px,
        }
    }

    /// IRLS weight `rho'(e) / (2e)`.
    pub fn weight(&self, e: f64) -> f64 {
        match *self {
            RobustLoss::None => 1.0,
            RobustLoss::Huber { delta_px } if e <= delta_px => 1.0,
            RobustLoss::Huber { delta_px } => delta_px / e,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineFlags {
    pub poses: bool,
    pub points: bool,
    pub focal: bool,
    pub principal_point: bool,
    pub distortion: bool,
}

impl Default for RefineFlags {
    fn default() -> Self {
        Self {
            poses: true,
            points: true,
            focal: true,
            principal_point: false,
            distortion: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BAOptions {
    pub max_iterations: usize,
    pub rel_cost_tol: f64,
    pub robust_loss: RobustLoss,
    pub refine: RefineFlags,
    pub damping_init: f64,
}

impl Default for BAOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            rel_cost_tol: 1e-6,
            robust_loss: RobustLoss::default(),
            refine: RefineFlags::default(),
            damping_init: 1e-4,
        }
    }
}

impl BAOptions {
    pub fn validate(&self) -> Result<(), BundleError> {
        let bad = |m: &str| Err(BundleError::InvalidOptions(m.to_string()));
        if !(self.rel_cost_tol > 0.0) {
            return bad("rel_cost_tol must be positive");
        }
        if !(self.damping_init > 0.0) {
            return bad("damping_init must be positive");
        }
        if let RobustLoss::Huber { delta_px } = self.robust_loss {
            if !(delta_px > 0.0) {
                return bad("huber delta_px must be positive");
            }
        }
        let f = self.refine;
        if !(f.poses || f.points || f.focal || f.principal_point || f.distortion) {
            return bad("at least one refine flag must be set");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BAReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    pub termination: Termination,
    pub mean_reproj_before: f64,
    pub mean_reproj_after: f64,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

/// `project(point) - observed` in pixels, or the behind-camera sentinel.
pub fn residual(
    camera: &CameraModel,
    pose: &Pose,
    point: &Vector3<f64>,
    observed: &Vector2<f64>,
) -> Vector2<f64> {
    let p = pose.transform_point(point);
    if !(p.z > 0.0) {
        return Vector2::repeat(BEHIND_CAMERA_RESIDUAL);
    }
    camera.normalized_to_pixel(&Vector2::new(p.x / p.z, p.y / p.z)) - observed
}

pub type Matrix2x6 = SMatrix<f64, 2, 6>;

/// Analytic derivatives of [`residual`].
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobians {
    /// With respect to `[w; dt]`.
    pub pose: Matrix2x6,
    pub point: Matrix2x3<f64>,
    /// One column per camera parameter, in parameter order.
    pub intrinsics: Matrix2xX<f64>,
    /// Set when the point is behind the camera; all blocks are then zero.
    pub behind: bool,
}

pub fn jacobians(camera: &CameraModel, pose: &Pose, point: &Vector3<f64>) -> Jacobians {
    let n = camera.params.len();
    let p = pose.transform_point(point);
    if !(p.z > 0.0) {
        return Jacobians {
            pose: Matrix2x6::zeros(),
            point: Matrix2x3::zeros(),
            intrinsics: Matrix2xX::zeros(n),
            behind: true,
        };
    }
    let z_inv = 1.0 / p.z;
    let uv = Vector2::new(p.x * z_inv, p.y * z_inv);
    let d_uv_d_p = Matrix2x3::new(z_inv, 0.0, -uv.x * z_inv, 0.0, z_inv, -uv.y * z_inv);
    let (fx, fy) = (camera.fx(), camera.fy());
    let focal = Matrix2::new(fx, 0.0, 0.0, fy);
    let j_proj = focal * camera.distortion_jacobian(&uv) * d_uv_d_p;

    let mut pose_j = Matrix2x6::zeros();
    pose_j
        .fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(j_proj * -p.cross_matrix()));
    pose_j.fixed_view_mut::<2, 3>(0, 3).copy_from(&j_proj);
    let point_j = j_proj * pose.rotation_matrix();

    let kind = camera.kind;
    let distorted = camera.distort(&uv);
    let mut intr = Matrix2xX::zeros(n);
    let fi = kind.focal_indices();
    if kind.has_single_focal() {
        intr[(0, fi[0])] = distorted.x;
        intr[(1, fi[0])] = distorted.y;
    } else {
        intr[(0, fi[0])] = distorted.x;
        intr[(1, fi[1])] = distorted.y;
    }
    let pp = kind.principal_point_indices();
    intr[(0, pp[0])] = 1.0;
    intr[(1, pp[1])] = 1.0;
    for (&col, d) in kind
        .distortion_indices()
        .iter()
        .zip(camera.distortion_param_jacobian(&uv))
    {
        intr[(0, col)] = fx * d.x;
        intr[(1, col)] = fy * d.y;
    }
    Jacobians {
        pose: pose_j,
        point: point_j,
        intrinsics: intr,
        behind: false,
    }
}

/// One observation's contribution to the linearized system.
#[derive(Debug, Clone)]
pub struct ObservationBlock {
    pub residual: Vector2<f64>,
    /// IRLS weight of the robust loss at this residual.
    pub weight: f64,
    /// Camera-side unknowns touched, in the column order of `j_camera`.
    pub camera_cols: Vec<usize>,
    pub j_camera: Matrix2xX<f64>,
    /// Offset of the point's three unknowns within the point part, if refined.
    pub point_col: Option<usize>,
    pub j_point: Matrix2x3<f64>,
}

/// Residuals and Jacobians at the current estimate. Unknowns are ordered
/// camera-side first (poses, then intrinsics) and points last.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub blocks: Vec<ObservationBlock>,
    pub num_camera_params: usize,
    pub num_point_params: usize,
    pub cost: f64,
}

/// Unknown layout and gauge choice for one model.
#[derive(Debug, Clone)]
pub struct BundleProblem {
    opts: BAOptions,
    pose_cols: BTreeMap<ImageId, [Option<usize>; 6]>,
    intrinsic_cols: BTreeMap<CameraId, Vec<(usize, usize)>>,
    point_cols: BTreeMap<PointId, usize>,
    num_camera_params: usize,
    num_point_params: usize,
    /// Per connected component: the fully frozen image, and the second image
    /// with the index of its frozen translation component.
    pub anchors: Vec<(ImageId, Option<(ImageId, usize)>)>,
}

fn observation_counts(model: &SparseModel) -> Result<BTreeMap<ImageId, usize>, BundleError> {
    let mut counts = BTreeMap::new();
    for (&pid, p) in &model.points {
        for el in &p.track {
            if !model.images.contains_key(&el.image_id) {
                return Err(BundleError::UnknownImage {
                    point: pid,
                    image: el.image_id,
                });
            }
            *counts.entry(el.image_id).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

/// Images grouped into components connected through shared points.
fn components(model: &SparseModel, images: &[ImageId]) -> Vec<Vec<ImageId>> {
    let index: BTreeMap<ImageId, usize> =
        images.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut parent: Vec<usize> = (0..images.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for p in model.points.values() {
        let mut it = p.track.iter().filter_map(|el| index.get(&el.image_id));
        let Some(&first) = it.next() else { continue };
        for &other in it {
            let (a, b) = (find(&mut parent, first), find(&mut parent, other));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<ImageId>> = BTreeMap::new();
    for (i, &id) in images.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(id);
    }
    groups.into_values().collect()
}

impl BundleProblem {
    pub fn new(model: &SparseModel, opts: &BAOptions) -> Result<Self, BundleError> {
        opts.validate()?;
        let counts = observation_counts(model)?;
        if counts.len() < 2 {
            return Err(BundleError::TooFewImages(counts.len()));
        }
        let flags = opts.refine;
        let observed: Vec<ImageId> = counts.keys().copied().collect();

        let mut anchors = Vec::new();
        let mut frozen: BTreeMap<ImageId, [bool; 6]> = BTreeMap::new();
        if flags.poses && flags.points {
            for comp in components(model, &observed) {
                let mut ranked = comp.clone();
                ranked.sort_by(|a, b| counts[b].cmp(&counts[a]).then(a.cmp(b)));
                let first = ranked[0];
                frozen.insert(first, [true; 6]);
                let second = ranked.get(1).and_then(|&id| {
                    let p1 = &model.images[&first].pose;
                    let p2 = &model.images[&id].pose;
                    let d = p2.rotation() * (p2.center() - p1.center());
                    if d.norm() < 1e-12 {
                        return None;
                    }
                    let axis = d.iamax();
                    let mut mask = [false; 6];
                    mask[3 + axis] = true;
                    frozen.insert(id, mask);
                    Some((id, axis))
                });
                anchors.push((first, second));
            }
        }

        let mut col = 0;
        let mut pose_cols = BTreeMap::new();
        if flags.poses {
            for &id in &observed {
                let mask = frozen.get(&id).copied().unwrap_or([false; 6]);
                let mut cols = [None; 6];
                for (k, c) in cols.iter_mut().enumerate() {
                    if !mask[k] {
                        *c = Some(col);
                        col += 1;
                    }
                }
                pose_cols.insert(id, cols);
            }
        }

        let used_cameras: BTreeSet<CameraId> = observed
            .iter()
            .map(|id| model.images[id].camera_id)
            .collect();
        let mut intrinsic_cols = BTreeMap::new();
        for cam_id in used_cameras {
            let Some(cam) = model.cameras.get(&cam_id) else {
                continue;
            };
            let kind = cam.model.kind;
            if kind == CameraModelKind::OpencvFisheye {
                continue;
            }
            let mut idx: Vec<usize> = Vec::new();
            if flags.focal {
                idx.extend(kind.focal_indices());
            }
            if flags.principal_point {
                idx.extend(kind.principal_point_indices());
            }
            if flags.distortion {
                idx.extend(kind.distortion_indices());
            }
            idx.sort_unstable();
            let cols: Vec<(usize, usize)> = idx
                .into_iter()
                .map(|i| {
                    col += 1;
                    (i, col - 1)
                })
                .collect();
            if !cols.is_empty() {
                intrinsic_cols.insert(cam_id, cols);
            }
        }
        let num_camera_params = col;

        let mut point_cols = BTreeMap::new();
        let mut num_point_params = 0;
        if flags.points {
            for &pid in model.points.keys() {
                point_cols.insert(pid, num_point_params);
                num_point_params += 3;
            }
        }

        Ok(Self {
            opts: *opts,
            pose_cols,
            intrinsic_cols,
            point_cols,
            num_camera_params,
            num_point_params,
            anchors,
        })
    }

    pub fn num_camera_params(&self) -> usize {
        self.num_camera_params
    }

    pub fn num_point_params(&self) -> usize {
        self.num_point_params
    }

    /// Robust cost `1/2 sum rho(|r|)` over every linked observation.
    pub fn cost(&self, model: &SparseModel) -> f64 {
        0.5 * model
            .points
            .values()
            .flat_map(|p| p.track.iter().map(move |el| (p, el)))
            .map(|(p, el)| {
                let image = &model.images[&el.image_id];
                let cam = &model.cameras[&image.camera_id].model;
                let r = residual(
                    cam,
                    &image.pose,
                    &p.xyz,
                    &image.observations[el.obs_index as usize].xy,
                );
                self.opts.robust_loss.rho(r.norm())
            })
            .sum::<f64>()
    }

    pub fn linearize(&self, model: &SparseModel) -> Linearization {
        let per_point: Vec<Vec<ObservationBlock>> = model
            .points
            .par_iter()
            .map(|(pid, p)| {
                p.track
                    .iter()
                    .map(|el| {
                        let image = &model.images[&el.image_id];
                        let cam = &model.cameras[&image.camera_id].model;
                        let obs = &image.observations[el.obs_index as usize].xy;
                        let r = residual(cam, &image.pose, &p.xyz, obs);
                        let j = jacobians(cam, &image.pose, &p.xyz);
                        let mut cols = Vec::new();
                        let mut jc_cols: Vec<Vector2<f64>> = Vec::new();
                        if let Some(pc) = self.pose_cols.get(&el.image_id) {
                            for (k, c) in pc.iter().enumerate() {
                                if let Some(c) = c {
                                    cols.push(*c);
                                    jc_cols.push(j.pose.column(k).into_owned());
                                }
                            }
                        }
                        if let Some(ic) = self.intrinsic_cols.get(&image.camera_id) {
                            for &(param, c) in ic {
                                cols.push(c);
                                jc_cols.push(j.intrinsics.column(param).into_owned());
                            }
                        }
                        let j_camera = if jc_cols.is_empty() {
                            Matrix2xX::zeros(0)
                        } else {
                            Matrix2xX::from_columns(&jc_cols)
                        };
                        ObservationBlock {
                            residual: r,
                            weight: self.opts.robust_loss.weight(r.norm()),
                            camera_cols: cols,
                            j_camera,
                            point_col: self.point_cols.get(pid).copied(),
                            j_point: j.point,
                        }
                    })
                    .collect()
            })
            .collect();
        let blocks: Vec<ObservationBlock> = per_point.into_iter().flatten().collect();
        Linearization {
            blocks,
            num_camera_params: self.num_camera_params,
            num_point_params: self.num_point_params,
            cost: self.cost(model),
        }
    }

    /// Solves `(H + lambda D) dx = -g` with `H = J^T W J`, `g = J^T W r` and
    /// `D` the camera-side diagonal of `H` and, per point, the mean of its
    /// 3x3 block diagonal (so the step does not depend on the world axes),
    /// clamped to `[1e-6, 1e32]`. The point blocks are eliminated.
    /// Returns `[camera part; point part]`, or `None` if the reduced system is
    /// not positive definite.
    pub fn schur_step(&self, lin: &Linearization, lambda: f64) -> Option<DVector<f64>> {
        let nc = lin.num_camera_params;
        let np = lin.num_point_params / 3;
        let mut u = DMatrix::<f64>::zeros(nc, nc);
        let mut gc = DVector::<f64>::zeros(nc);
        let mut v = vec![Matrix3::<f64>::zeros(); np];
        let mut gp = vec![Vector3::<f64>::zeros(); np];
        let mut w: Vec<BTreeMap<usize, RowVector3<f64>>> = vec![BTreeMap::new(); np];

        for b in &lin.blocks {
            let k = b.camera_cols.len();
            let wr = b.residual * b.weight;
            for a in 0..k {
                let ja = b.j_camera.column(a);
                let ca = b.camera_cols[a];
                gc[ca] -= ja.dot(&wr);
                for c in 0..k {
                    u[(ca, b.camera_cols[c])] += b.weight * ja.dot(&b.j_camera.column(c));
                }
            }
            if let Some(pc) = b.point_col {
                let p = pc / 3;
                let jp = &b.j_point;
                v[p] += jp.transpose() * jp * b.weight;
                gp[p] -= jp.transpose() * wr;
                for a in 0..k {
                    let ja = b.j_camera.column(a);
                    let row: RowVector3<f64> = (ja.transpose() * jp) * b.weight;
                    *w[p]
                        .entry(b.camera_cols[a])
                        .or_insert_with(RowVector3::zeros) += row;
                }
            }
        }

        let damp = |x: f64| lambda * x.clamp(MIN_DIAGONAL, MAX_DIAGONAL);
        for i in 0..nc {
            u[(i, i)] += damp(u[(i, i)]);
        }
        let mut v_inv = Vec::with_capacity(np);
        for vp in &mut v {
            let d = damp(vp.trace() / 3.0);
            for i in 0..3 {
                vp[(i, i)] += d;
            }
            v_inv.push(vp.try_inverse()?);
        }

        let mut s = u;
        let mut rhs = gc;
        for p in 0..np {
            // S -= W_p V_p^-1 W_p^T over the columns this point touches.
            let cols: Vec<usize> = w[p].keys().copied().collect();
            let m = cols.len();
            let wp = DMatrix::from_fn(m, 3, |a, k| w[p][&cols[a]][k]);
            let y = &wp * v_inv[p];
            let outer = &y * wp.transpose();
            let yg = &y * gp[p];
            for (a, &i) in cols.iter().enumerate() {
                rhs[i] -= yg[a];
                for (b, &j) in cols.iter().enumerate() {
                    s[(i, j)] -= outer[(a, b)];
                }
            }
        }

        let dc = if nc > 0 {
            let chol = s.cholesky()?;
            chol.solve(&rhs)
        } else {
            DVector::zeros(0)
        };

        let mut step = DVector::<f64>::zeros(nc + 3 * np);
        step.rows_mut(0, nc).copy_from(&dc);
        for p in 0..np {
            let mut rhs_p = gp[p];
            for (&i, wi) in &w[p] {
                rhs_p -= wi.transpose() * dc[i];
            }
            let dp = v_inv[p] * rhs_p;
            step.fixed_rows_mut::<3>(nc + 3 * p).copy_from(&dp);
        }
        Some(step)
    }

    /// Applies a step laid out as returned by [`Self::schur_step`].
    pub fn apply_step(&self, model: &SparseModel, step: &DVector<f64>) -> SparseModel {
        let mut out = model.clone();
        let nc = self.num_camera_params;
        for (id, cols) in &self.pose_cols {
            let get = |k: usize| cols[k].map_or(0.0, |c| step[c]);
            let omega = Vector3::new(get(0), get(1), get(2));
            let dt = Vector3::new(get(3), get(4), get(5));
            let image = out.images.get_mut(id).expect("laid out from this model");
            let delta = UnitQuaternion::from_scaled_axis(omega);
            let rotation =
                UnitQuaternion::new_normalize((delta * image.pose.rotation()).into_inner());
            image.pose = Pose::new(rotation, delta * image.pose.translation() + dt);
        }
        for (cam_id, cols) in &self.intrinsic_cols {
            let cam = out
                .cameras
                .get_mut(cam_id)
                .expect("laid out from this model");
            for &(param, c) in cols {
                cam.model.params[param] += step[c];
            }
        }
        for (pid, &pc) in &self.point_cols {
            let p = out.points.get_mut(pid).expect("laid out from this model");
            p.xyz += step.fixed_rows::<3>(nc + pc).into_owned();
        }
        out
    }

    /// Norm of the current values of the free non-rotation unknowns.
    fn parameter_norm(&self, model: &SparseModel) -> f64 {
        let mut sq = 0.0;
        for (id, cols) in &self.pose_cols {
            let t = model.images[id].pose.translation();
            for k in 0..3 {
                if cols[3 + k].is_some() {
                    sq += t[k] * t[k];
                }
            }
        }
        for (cam_id, cols) in &self.intrinsic_cols {
            for &(param, _) in cols {
                sq += model.cameras[cam_id].model.params[param].powi(2);
            }
        }
        for pid in self.point_cols.keys() {
            sq += model.points[pid].xyz.norm_squared();
        }
        sq.sqrt()
    }
}

/// Mean pixel residual norm over all linked observations.
pub fn mean_reprojection_error(model: &SparseModel) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in model.points.values() {
        for el in &p.track {
            let image = &model.images[&el.image_id];
            let cam = &model.cameras[&image.camera_id].model;
            sum += residual(
                cam,
                &image.pose,
                &p.xyz,
                &image.observations[el.obs_index as usize].xy,
            )
            .norm();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn cameras_valid(model: &SparseModel) -> bool {
    model.cameras.values().all(|c| c.model.validate().is_ok())
}

/// Runs Levenberg-Marquardt until the relative cost decrease falls below
/// `rel_cost_tol`, the step vanishes, the iteration budget is spent, or the
/// damping exceeds [`MAX_DAMPING`]. The best model seen is returned.
pub fn solve(
    model: &SparseModel,
    opts: &BAOptions,
) -> Result<(SparseModel, BAReport), BundleError> {
    let problem = BundleProblem::new(model, opts)?;
    let mut current = model.clone();
    let mut cost = problem.cost(&current);
    let initial_cost = cost;
    let mean_before = mean_reprojection_error(&current);
    let num_obs = current.num_linked_observations().max(1);
    let mut lambda = opts.damping_init;
    let mut history = vec![cost];
    let mut iterations = 0;

    // Residuals at round-off level: nothing to improve.
    let termination = if cost <= 1e-20 * num_obs as f64 {
        Termination::Converged
    } else {
        'outer: loop {
            if iterations >= opts.max_iterations {
                break Termination::MaxIterations;
            }
            let lin = problem.linearize(&current);
            loop {
                if lambda > MAX_DAMPING {
                    break 'outer Termination::Stalled;
                }
                let Some(step) = problem.schur_step(&lin, lambda) else {
                    lambda *= 10.0;
                    continue;
                };
                let scale = problem.parameter_norm(&current);
                if step.norm() <= 1e-12 * (scale + 1e-12) {
                    break 'outer Termination::Converged;
                }
                let candidate = problem.apply_step(&current, &step);
                let new_cost = if cameras_valid(&candidate) {
                    problem.cost(&candidate)
                } else {
                    f64::INFINITY
                };
                if new_cost < cost {
                    let decrease = (cost - new_cost) / cost;
                    current = candidate;
                    cost = new_cost;
                    iterations += 1;
                    history.push(cost);
                    lambda = (lambda / 10.0).max(1e-15);
                    if decrease < opts.rel_cost_tol {
                        break 'outer Termination::Converged;
                    }
                    break;
                }
                lambda *= 10.0;
            }
        }
    };

    let report = BAReport {
        initial_cost,
        final_cost: cost,
        iterations,
        termination,
        mean_reproj_before: mean_before,
        mean_reproj_after: mean_reprojection_error(&current),
        cost_history: history,
    };
    let errors: Vec<(PointId, f64)> = current
        .points
        .iter()
        .map(|(id, p)| (*id, crate::mapping::point_error(&current, p)))
        .collect();
    for (id, e) in errors {
        current.points.get_mut(&id).expect("listed").error = e;
    }
    Ok((current, report))
}

/// Pose-only robust Levenberg-Marquardt against fixed 3D points.
///
/// Returns the refined pose and its final robust cost.
pub fn refine_pose(
    camera: &CameraModel,
    pose: &Pose,
    correspondences: &[(Vector3<f64>, Vector2<f64>)],
    loss: RobustLoss,
    max_iterations: usize,
) -> (Pose, f64) {
    let cost_of = |pose: &Pose| -> f64 {
        correspondences
            .iter()
            .map(|(x, uv)| loss.rho(residual(camera, pose, x, uv).norm()))
            .sum()
    };
    let mut pose = *pose;
    let mut cost = cost_of(&pose);
    let mut lambda = 1e-4;
    for _ in 0..max_iterations {
        let mut h = SMatrix::<f64, 6, 6>::zeros();
        let mut g = SMatrix::<f64, 6, 1>::zeros();
        for (x, uv) in correspondences {
            let j = jacobians(camera, &pose, x);
            if j.behind {
                continue;
            }
            let r = residual(camera, &pose, x, uv);
            let w = loss.weight(r.norm());
            h += w * j.pose.transpose() * j.pose;
            g += w * j.pose.transpose() * r;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * h[(i, i)].clamp(1e-6, 1e32);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&-g)) else {
                lambda *= 10.0;
                continue;
            };
            let omega = Vector3::new(step[0], step[1], step[2]);
            let dt = Vector3::new(step[3], step[4], step[5]);
            let delta = UnitQuaternion::from_scaled_axis(omega);
            let rotation = UnitQuaternion::new_normalize((delta * pose.rotation()).into_inner());
            let candidate = Pose::new(rotation, delta * pose.translation() + dt);
            let c = cost_of(&candidate);
            if c < cost {
                let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
                pose = candidate;
                cost = c;
                lambda = (lambda / 10.0).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (pose, cost)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn residual_examples() {
        let cam = CameraModel::simple_pinhole(1000.0, 0.0, 0.0);
        let pose = Pose::identity();
        let x = Vector3::new(0.0, 0.0, 1.0);
        assert_eq!(
            residual(&cam, &pose, &x, &Vector2::zeros()),
            Vector2::zeros()
        );
        let r = residual(&cam, &pose, &Vector3::new(0.1, 0.0, 1.0), &Vector2::zeros());
        assert!((r - Vector2::new(100.0, 0.0)).norm() < 1e-9);
        let r = residual(
            &cam,
            &pose,
            &Vector3::new(0.0, 0.0, -1.0),
            &Vector2::zeros(),
        );
        assert_eq!(r, Vector2::new(1e4, 1e4));
        assert!(jacobians(&cam, &pose, &Vector3::new(0.0, 0.0, -1.0)).behind);
    }

    #[test]
    fn huber_weights() {
        let h = RobustLoss::Huber { delta_px: 1.0 };
        assert_eq!(h.rho(0.5), 0.25);
        assert_eq!(h.rho(3.0), 5.0);
        assert_eq!(h.weight(4.0), 0.25);
        assert_eq!(RobustLoss::None.weight(100.0), 1.0);
    }

    #[test]
    fn options_validate() {
        assert!(BAOptions::default().validate().is_ok());
        let none = BAOptions {
            refine: RefineFlags {
                poses: false,
                points: false,
                focal: false,
                principal_point: false,
                distortion: false,
            },
            ..Default::default()
        };
        assert!(none.validate().is_err());
        assert!(BAOptions {
            rel_cost_tol: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
