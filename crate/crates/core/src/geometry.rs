//! Camera models, rigid poses, projection and triangulation.
//!
//! Conventions follow the usual sparse-model layout: poses are world-to-camera
//! (`x_cam = R * X + t`), the camera looks down `+z`, and normalized image
//! coordinates are `(x/z, y/z)` before distortion.

use std::fmt;

use nalgebra::{
    DMatrix, Matrix2, Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ImageId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
}

/// Maximum Newton iterations used when removing lens distortion.
pub const UNDISTORT_MAX_ITERS: usize = 10;
/// Convergence tolerance (normalized image units) for distortion removal.
pub const UNDISTORT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CameraModelKind {
    SimplePinhole,
    Pinhole,
    SimpleRadial,
    Radial,
    Opencv,
    OpencvFisheye,
}

impl CameraModelKind {
    pub const ALL: [CameraModelKind; 6] = [
        CameraModelKind::SimplePinhole,
        CameraModelKind::Pinhole,
        CameraModelKind::SimpleRadial,
        CameraModelKind::Radial,
        CameraModelKind::Opencv,
        CameraModelKind::OpencvFisheye,
    ];

    /// Numeric id used by the binary model format.
    pub fn id(self) -> i32 {
        match self {
            CameraModelKind::SimplePinhole => 0,
            CameraModelKind::Pinhole => 1,
            CameraModelKind::SimpleRadial => 2,
            CameraModelKind::Radial => 3,
            CameraModelKind::Opencv => 4,
            CameraModelKind::OpencvFisheye => 5,
        }
    }

    pub fn from_id(id: i32) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModelKind::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModelKind::Pinhole => "PINHOLE",
            CameraModelKind::SimpleRadial => "SIMPLE_RADIAL",
            CameraModelKind::Radial => "RADIAL",
            CameraModelKind::Opencv => "OPENCV",
            CameraModelKind::OpencvFisheye => "OPENCV_FISHEYE",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn num_params(self) -> usize {
        match self {
            CameraModelKind::SimplePinhole => 3,
            CameraModelKind::Pinhole => 4,
            CameraModelKind::SimpleRadial => 4,
            CameraModelKind::Radial => 5,
            CameraModelKind::Opencv => 8,
            CameraModelKind::OpencvFisheye => 8,
        }
    }

    /// True when a single focal length is shared by both axes.
    pub fn has_single_focal(self) -> bool {
        matches!(
            self,
            CameraModelKind::SimplePinhole
                | CameraModelKind::SimpleRadial
                | CameraModelKind::Radial
        )
    }

    pub fn focal_indices(self) -> &'static [usize] {
        if self.has_single_focal() {
            &[0]
        } else {
            &[0, 1]
        }
    }

    pub fn principal_point_indices(self) -> &'static [usize] {
        if self.has_single_focal() {
            &[1, 2]
        } else {
            &[2, 3]
        }
    }

    pub fn distortion_indices(self) -> &'static [usize] {
        match self {
            CameraModelKind::SimplePinhole | CameraModelKind::Pinhole => &[],
            CameraModelKind::SimpleRadial => &[3],
            CameraModelKind::Radial => &[3, 4],
            CameraModelKind::Opencv | CameraModelKind::OpencvFisheye => &[4, 5, 6, 7],
        }
    }
}

impl fmt::Display for CameraModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Intrinsic model: a lens kind plus its ordered parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub kind: CameraModelKind,
    pub params: Vec<f64>,
}

impl CameraModel {
    pub fn new(kind: CameraModelKind, params: Vec<f64>) -> Result<Self, GeometryError> {
        let camera = Self { kind, params };
        camera.validate()?;
        Ok(camera)
    }

    pub fn simple_pinhole(f: f64, cx: f64, cy: f64) -> Self {
        Self {
            kind: CameraModelKind::SimplePinhole,
            params: vec![f, cx, cy],
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.params.len() != self.kind.num_params() {
            return Err(GeometryError::InvalidCamera(format!(
                "{} expects {} params, got {}",
                self.kind,
                self.kind.num_params(),
                self.params.len()
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::InvalidCamera(format!(
                "{} has non-finite params",
                self.kind
            )));
        }
        if self
            .kind
            .focal_indices()
            .iter()
            .any(|&i| self.params[i] <= 0.0)
        {
            return Err(GeometryError::InvalidCamera(format!(
                "{} has non-positive focal length",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn fx(&self) -> f64 {
        self.params[0]
    }

    pub fn fy(&self) -> f64 {
        if self.kind.has_single_focal() {
            self.params[0]
        } else {
            self.params[1]
        }
    }

    /// Arithmetic mean of the two axis focal lengths.
    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx() + self.fy())
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        let idx = self.kind.principal_point_indices();
        Vector2::new(self.params[idx[0]], self.params[idx[1]])
    }

    fn distortion(&self) -> &[f64] {
        match self.kind {
            CameraModelKind::SimplePinhole | CameraModelKind::Pinhole => &[],
            CameraModelKind::SimpleRadial | CameraModelKind::Radial => &self.params[3..],
            CameraModelKind::Opencv | CameraModelKind::OpencvFisheye => &self.params[4..],
        }
    }

    /// Applies lens distortion to undistorted normalized coordinates.
    pub fn distort(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        let (u, v) = (uv.x, uv.y);
        let k = self.distortion();
        match self.kind {
            CameraModelKind::SimplePinhole | CameraModelKind::Pinhole => *uv,
            CameraModelKind::SimpleRadial => {
                let s = u * u + v * v;
                uv * (1.0 + k[0] * s)
            }
            CameraModelKind::Radial => {
                let s = u * u + v * v;
                uv * (1.0 + k[0] * s + k[1] * s * s)
            }
            CameraModelKind::Opencv => {
                let (k1, k2, p1, p2) = (k[0], k[1], k[2], k[3]);
                let s = u * u + v * v;
                let g = 1.0 + k1 * s + k2 * s * s;
                Vector2::new(
                    u * g + 2.0 * p1 * u * v + p2 * (s + 2.0 * u * u),
                    v * g + 2.0 * p2 * u * v + p1 * (s + 2.0 * v * v),
                )
            }
            CameraModelKind::OpencvFisheye => {
                let r = uv.norm();
                if r < 1e-12 {
                    return *uv;
                }
                let theta = r.atan();
                uv * (fisheye_theta_d(theta, k) / r)
            }
        }
    }

    /// Jacobian of [`CameraModel::distort`] with respect to the normalized coordinates.
    pub fn distortion_jacobian(&self, uv: &Vector2<f64>) -> Matrix2<f64> {
        let (u, v) = (uv.x, uv.y);
        let k = self.distortion();
        let s = u * u + v * v;
        match self.kind {
            CameraModelKind::SimplePinhole | CameraModelKind::Pinhole => Matrix2::identity(),
            CameraModelKind::SimpleRadial | CameraModelKind::Radial => {
                let k2 = if k.len() > 1 { k[1] } else { 0.0 };
                let g = 1.0 + k[0] * s + k2 * s * s;
                let dg = k[0] + 2.0 * k2 * s;
                Matrix2::new(
                    g + 2.0 * u * u * dg,
                    2.0 * u * v * dg,
                    2.0 * u * v * dg,
                    g + 2.0 * v * v * dg,
                )
            }
            CameraModelKind::Opencv => {
                let (k1, k2, p1, p2) = (k[0], k[1], k[2], k[3]);
                let g = 1.0 + k1 * s + k2 * s * s;
                let dg = k1 + 2.0 * k2 * s;
                Matrix2::new(
                    g + 2.0 * u * u * dg + 2.0 * p1 * v + 6.0 * p2 * u,
                    2.0 * u * v * dg + 2.0 * p1 * u + 2.0 * p2 * v,
                    2.0 * u * v * dg + 2.0 * p2 * v + 2.0 * p1 * u,
                    g + 2.0 * v * v * dg + 2.0 * p2 * u + 6.0 * p1 * v,
                )
            }
            CameraModelKind::OpencvFisheye => {
                let r = s.sqrt();
                if r < 1e-12 {
                    return Matrix2::identity();
                }
                let theta = r.atan();
                let theta_d = fisheye_theta_d(theta, k);
                let scale = theta_d / r;
                let dtheta_d = fisheye_theta_d_derivative(theta, k);
                let dscale_dr = (dtheta_d * r / (1.0 + s) - theta_d) / s;
                let dir = uv / r;
                Matrix2::identity() * scale + uv * dir.transpose() * dscale_dr
            }
        }
    }

    /// Jacobian of [`CameraModel::distort`] with respect to the distortion
    /// coefficients, one column per coefficient in parameter order.
    pub fn distortion_param_jacobian(&self, uv: &Vector2<f64>) -> Vec<Vector2<f64>> {
        let (u, v) = (uv.x, uv.y);
        let s = u * u + v * v;
        match self.kind {
            CameraModelKind::SimplePinhole | CameraModelKind::Pinhole => Vec::new(),
            CameraModelKind::SimpleRadial => vec![uv * s],
            CameraModelKind::Radial => vec![uv * s, uv * (s * s)],
            CameraModelKind::Opencv => vec![
                uv * s,
                uv * (s * s),
                Vector2::new(2.0 * u * v, s + 2.0 * v * v),
                Vector2::new(s + 2.0 * u * u, 2.0 * u * v),
            ],
            CameraModelKind::OpencvFisheye => {
                let r = s.sqrt();
                if r < 1e-12 {
                    return vec![Vector2::zeros(); 4];
                }
                let theta = r.atan();
                let dir = uv / r;
                let t2 = theta * theta;
                let mut pow = theta * t2;
                (0..4)
                    .map(|_| {
                        let col = dir * pow;
                        pow *= t2;
                        col
                    })
                    .collect()
            }
        }
    }

    /// Inverts [`CameraModel::distort`] by damped Newton iteration.
    pub fn undistort(&self, distorted: &Vector2<f64>) -> Vector2<f64> {
        if matches!(
            self.kind,
            CameraModelKind::SimplePinhole | CameraModelKind::Pinhole
        ) {
            return *distorted;
        }
        let mut uv = *distorted;
        let mut residual = self.distort(&uv) - distorted;
        for _ in 0..UNDISTORT_MAX_ITERS {
            if residual.norm() < UNDISTORT_TOL * 1e-3 {
                break;
            }
            let jac = self.distortion_jacobian(&uv);
            let step = match jac.try_inverse() {
                Some(inv) => inv * residual,
                None => residual,
            };
            let mut damping = 1.0;
            let mut accepted = false;
            for _ in 0..8 {
                let candidate = uv - step * damping;
                let candidate_residual = self.distort(&candidate) - distorted;
                if candidate_residual.norm() < residual.norm() {
                    uv = candidate;
                    residual = candidate_residual;
                    accepted = true;
                    break;
                }
                damping *= 0.5;
            }
            if !accepted || step.norm() * damping < UNDISTORT_TOL {
                break;
            }
        }
        uv
    }

    /// Distorted normalized coordinates to pixels.
    pub fn to_pixel(&self, distorted: &Vector2<f64>) -> Vector2<f64> {
        let c = self.principal_point();
        Vector2::new(self.fx() * distorted.x + c.x, self.fy() * distorted.y + c.y)
    }

    /// Pixels to distorted normalized coordinates.
    pub fn from_pixel(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        let c = self.principal_point();
        Vector2::new((pixel.x - c.x) / self.fx(), (pixel.y - c.y) / self.fy())
    }

    /// Undistorted normalized image coordinates of a pixel (the `z = 1` ray).
    pub fn pixel_to_normalized(&self, pixel: &Vector2<f64>) -> Vector2<f64> {
        self.undistort(&self.from_pixel(pixel))
    }

    pub fn normalized_to_pixel(&self, uv: &Vector2<f64>) -> Vector2<f64> {
        self.to_pixel(&self.distort(uv))
    }
}

fn fisheye_theta_d(theta: f64, k: &[f64]) -> f64 {
    let t2 = theta * theta;
    theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))
}

fn fisheye_theta_d_derivative(theta: f64, k: &[f64]) -> f64 {
    let t2 = theta * theta;
    1.0 + t2 * (3.0 * k[0] + t2 * (5.0 * k[1] + t2 * (7.0 * k[2] + t2 * 9.0 * k[3])))
}

/// World-to-camera rigid transform. The quaternion is kept with `w >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical_quaternion(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    /// Builds a pose from a quaternion given as `(w, x, y, z)`, renormalizing it.
    pub fn from_wxyz(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        Self::new(UnitQuaternion::from_quaternion(quat), translation)
    }

    /// Pose whose camera center sits at `center`.
    pub fn from_center(rotation: UnitQuaternion<f64>, center: &Vector3<f64>) -> Self {
        Self::new(rotation, -(rotation * center))
    }

    /// Camera at `eye` looking at `target`; image `y` points along `-up`.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Option<Self> {
        let z = (target - eye).try_normalize(1e-12)?;
        let x = z.cross(&-up).try_normalize(1e-12)?;
        let y = z.cross(&x);
        // Rows of the world-to-camera rotation are the camera axes in world frame.
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        Some(Self::from_center(rotation, eye))
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    /// `x_cam = R * X + t`.
    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn center(&self) -> Vector3<f64> {
        camera_center(self)
    }

    /// Optical axis expressed in world coordinates.
    pub fn principal_axis(&self) -> Vector3<f64> {
        self.rotation.inverse() * Vector3::z()
    }

    /// The `(w, x, y, z)` quaternion coefficients.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

fn canonical_quaternion(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.quaternion().w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Result of projecting a world point. `pixel` is NaN when the point is behind the camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

impl Projection {
    pub fn is_behind(&self) -> bool {
        // Also catches NaN depth.
        !(self.depth > 0.0)
    }
}

pub fn project(camera: &CameraModel, pose: &Pose, point: &Vector3<f64>) -> Projection {
    let p = pose.transform_point(point);
    let depth = p.z;
    if !(depth > 0.0) {
        return Projection {
            pixel: Vector2::new(f64::NAN, f64::NAN),
            depth,
        };
    }
    let uv = Vector2::new(p.x / depth, p.y / depth);
    Projection {
        pixel: camera.normalized_to_pixel(&uv),
        depth,
    }
}

/// Angle between two vectors in radians, stable near 0 and pi.
pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Geodesic distance between two rotations in degrees, in `[0, 180]`.
///
/// Equal to `acos((trace(Ra^T Rb) - 1) / 2)` but evaluated through the
/// relative quaternion so that tiny angles keep full precision.
pub fn rotation_error_deg(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let rel = a.inverse() * b;
    let q = rel.quaternion();
    (2.0 * q.vector().norm().atan2(q.w.abs())).to_degrees()
}

/// `C = -R^T t`.
pub fn camera_center(pose: &Pose) -> Vector3<f64> {
    -(pose.rotation.inverse() * pose.translation)
}

/// Angle between the optical axes of two cameras, in degrees.
pub fn viewing_ray_angle_deg(a: &Pose, b: &Pose) -> f64 {
    angle_between(&a.principal_axis(), &b.principal_axis()).to_degrees()
}

/// A single 2D measurement of a 3D point.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub image_id: ImageId,
    pub pose: &'a Pose,
    pub camera: &'a CameraModel,
    pub pixel: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    pub mean_reproj_px: f64,
    /// Largest pairwise angle between rays from camera centers to the point.
    pub tri_angle_deg: f64,
}

/// Pixel reprojection error; `INFINITY` for points behind the camera.
pub fn reprojection_error(
    camera: &CameraModel,
    pose: &Pose,
    point: &Vector3<f64>,
    pixel: &Vector2<f64>,
) -> f64 {
    let proj = project(camera, pose, point);
    if proj.is_behind() {
        f64::INFINITY
    } else {
        (proj.pixel - pixel).norm()
    }
}

/// Largest pairwise angle (degrees) between rays from `centers` to `point`.
pub fn max_triangulation_angle_deg(centers: &[Vector3<f64>], point: &Vector3<f64>) -> f64 {
    let rays: Vec<Vector3<f64>> = centers.iter().map(|c| point - c).collect();
    let mut best = 0.0f64;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            best = best.max(angle_between(&rays[i], &rays[j]));
        }
    }
    best.to_degrees()
}

/// Multi-view DLT triangulation over undistorted normalized rays.
pub fn triangulate(observations: &[Observation<'_>]) -> Result<Triangulation, GeometryError> {
    if observations.len() < 2 {
        return Err(GeometryError::TooFewObservations {
            needed: 2,
            got: observations.len(),
        });
    }

    let centers: Vec<Vector3<f64>> = observations.iter().map(|o| o.pose.center()).collect();
    let rays_cam: Vec<Vector3<f64>> = observations
        .iter()
        .map(|o| {
            let uv = o.camera.pixel_to_normalized(&o.pixel);
            Vector3::new(uv.x, uv.y, 1.0).normalize()
        })
        .collect();

    let origin = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let spread = centers
        .iter()
        .map(|c| (c - origin).norm())
        .fold(0.0, f64::max);
    let scale_ref = origin.norm().max(1.0);
    if spread < 1e-12 * scale_ref {
        return Err(GeometryError::Degenerate(
            "all camera centers coincide".into(),
        ));
    }
    let rays_world: Vec<Vector3<f64>> = observations
        .iter()
        .zip(&rays_cam)
        .map(|(o, r)| o.pose.rotation().inverse() * r)
        .collect();
    let mut max_ray_angle = 0.0f64;
    for i in 0..rays_world.len() {
        for j in i + 1..rays_world.len() {
            max_ray_angle = max_ray_angle.max(angle_between(&rays_world[i], &rays_world[j]));
        }
    }
    if max_ray_angle < 1e-8 {
        return Err(GeometryError::Degenerate(
            "viewing rays are parallel".into(),
        ));
    }

    // Work in a frame centered on the cameras and scaled by their spread so the
    // homogeneous system is well conditioned: X = origin + spread * X'.
    let mut a = DMatrix::<f64>::zeros(3 * observations.len(), 4);
    for (k, (obs, ray)) in observations.iter().zip(&rays_cam).enumerate() {
        let r = obs.pose.rotation_matrix();
        let t = (r * origin + obs.pose.translation()) / spread;
        let skew = ray.cross_matrix();
        let rows_r = skew * r;
        let rows_t = skew * t;
        for row in 0..3 {
            for col in 0..3 {
                a[(3 * k + row, col)] = rows_r[(row, col)];
            }
            a[(3 * k + row, 3)] = rows_t[row];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeometryError::Degenerate("SVD failed".into()))?;
    let (min_idx, _) =
        svd.singular_values
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc },
            );
    let h = v_t.row(min_idx);
    let w = h[3];
    let xyz = Vector3::new(h[0], h[1], h[2]);
    if w.abs() <= 1e-14 * xyz.norm() {
        return Err(GeometryError::Degenerate("point at infinity".into()));
    }
    let point = origin + (xyz / w) * spread;

    let mean_reproj_px = observations
        .iter()
        .map(|o| reprojection_error(o.camera, o.pose, &point, &o.pixel))
        .sum::<f64>()
        / observations.len() as f64;
    Ok(Triangulation {
        point,
        mean_reproj_px,
        tri_angle_deg: max_triangulation_angle_deg(&centers, &point),
    })
}
