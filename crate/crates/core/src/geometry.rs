//! SO(3)/SE(3) primitives used throughout the toolkit.
//!
//! Poses are stored world-to-camera: a world point `X` maps to camera
//! coordinates as `R·X + t`, and the camera center is `C = −Rᵀ·t`.
//! Cameras follow the OpenCV axis convention (x right, y down, z forward).

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// 3-vector in meters (or unitless directions).
pub type Vec3 = Vector3<f64>;

const ORTHO_TOL: f64 = 1e-9;
const QUAT_NORM_TOL: f64 = 1e-6;

/// Default translation weight of the camera-pair distance.
pub const DEFAULT_LAMBDA_T: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
}

/// A proper rotation matrix (orthonormal, det = +1).
#[derive(Clone, Copy, PartialEq)]
pub struct Rotation3(Matrix3<f64>);

impl fmt::Debug for Rotation3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Rotation3").field(&self.0.as_slice()).finish()
    }
}

impl Rotation3 {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and determinant to 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidInput("non-finite rotation entry".into()));
        }
        let err = (m.transpose() * m - Matrix3::identity()).abs().max();
        if err > ORTHO_TOL {
            return Err(GeometryError::InvalidInput(format!(
                "rotation columns not orthonormal (max deviation {err:e})"
            )));
        }
        let det = m.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::InvalidInput(format!("rotation determinant {det}")));
        }
        Ok(Self(m))
    }

    /// Right-handed rotation by `angle` radians about `axis` (Rodrigues).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 || angle == 0.0 {
            return Self::identity();
        }
        let k = axis / n;
        let (s, c) = angle.sin_cos();
        let kx = skew(&k);
        Self(Matrix3::identity() + kx * s + kx * kx * (1.0 - c))
    }

    pub fn rx(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn ry(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rz(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Rotation angle in radians, in [0, π].
    ///
    /// Evaluated as `atan2(sin θ, cos θ)` with `cos θ = (Tr − 1)/2` and
    /// `sin θ` from the skew part, which equals the clamped arccos form but
    /// stays accurate near θ = 0.
    pub fn angle(&self) -> f64 {
        let m = &self.0;
        let cos = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let sin = 0.5
            * Vec3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)])
                .norm();
        sin.atan2(cos)
    }
}

impl Mul for Rotation3 {
    type Output = Rotation3;

    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

impl Mul<Vec3> for Rotation3 {
    type Output = Vec3;

    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

pub(crate) fn skew(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Unit quaternion with canonical sign: `w ≥ 0`, and when `w = 0` the first
/// nonzero of `(x, y, z)` is positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    /// Accepts quaternions whose norm is within 1e-6 of one, then
    /// renormalizes and canonicalizes the sign.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > QUAT_NORM_TOL {
            return Err(GeometryError::InvalidInput(format!("quaternion norm {n} is not 1")));
        }
        // Already-normalized input is kept bit-for-bit so stored quaternions
        // survive a serialize/parse round trip unchanged.
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(Self { w, x, y, z }.canonical());
        }
        Ok(Self::normalize(w, x, y, z).expect("norm checked above"))
    }

    /// Normalizes an arbitrary nonzero 4-vector.
    pub fn normalize(w: f64, x: f64, y: f64, z: f64) -> Option<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n == 0.0 {
            return None;
        }
        Some(Self { w: w / n, x: x / n, y: y / n, z: z / n }.canonical())
    }

    pub fn identity() -> Self {
        Self { w: 1.0, x: 0.0, y: 0.0, z: 0.0 }
    }

    fn canonical(self) -> Self {
        let lead = if self.w != 0.0 {
            self.w
        } else if self.x != 0.0 {
            self.x
        } else if self.y != 0.0 {
            self.y
        } else {
            self.z
        };
        if lead < 0.0 {
            Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            // Drop negative zeros so equal quaternions compare bit-identical.
            Self { w: self.w + 0.0, x: self.x + 0.0, y: self.y + 0.0, z: self.z + 0.0 }
        }
    }

    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn w(&self) -> f64 {
        self.w
    }
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        q.wxyz()
    }
}

pub fn quat_to_rotation(q: &UnitQuaternion) -> Rotation3 {
    let [w, x, y, z] = q.wxyz();
    let m = Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    Rotation3(m)
}

/// Shepperd's method: pivots on the largest of (trace, diagonal entries).
pub fn rotation_to_quat(r: &Rotation3) -> UnitQuaternion {
    let m = r.matrix();
    let tr = m.trace();
    let (w, x, y, z);
    if tr >= m[(0, 0)] && tr >= m[(1, 1)] && tr >= m[(2, 2)] {
        let s = 2.0 * (1.0 + tr).sqrt();
        w = 0.25 * s;
        x = (m[(2, 1)] - m[(1, 2)]) / s;
        y = (m[(0, 2)] - m[(2, 0)]) / s;
        z = (m[(1, 0)] - m[(0, 1)]) / s;
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
        w = (m[(2, 1)] - m[(1, 2)]) / s;
        x = 0.25 * s;
        y = (m[(0, 1)] + m[(1, 0)]) / s;
        z = (m[(0, 2)] + m[(2, 0)]) / s;
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
        w = (m[(0, 2)] - m[(2, 0)]) / s;
        x = (m[(0, 1)] + m[(1, 0)]) / s;
        y = 0.25 * s;
        z = (m[(1, 2)] + m[(2, 1)]) / s;
    } else {
        let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
        w = (m[(1, 0)] - m[(0, 1)]) / s;
        x = (m[(0, 2)] + m[(2, 0)]) / s;
        y = (m[(1, 2)] + m[(2, 1)]) / s;
        z = 0.25 * s;
    }
    UnitQuaternion::normalize(w, x, y, z).expect("rotation yields a nonzero quaternion")
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Rotation3, translation: Vec3) -> Result<Self, GeometryError> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidInput("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a pose from a world-to-camera rotation and the camera center.
    pub fn from_center(rotation: Rotation3, center: &Vec3) -> Self {
        Self { rotation, translation: -(rotation.matrix() * center) }
    }

    pub fn from_quat(q: &UnitQuaternion, translation: Vec3) -> Self {
        Self { rotation: quat_to_rotation(q), translation }
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.matrix().transpose() * self.translation)
    }

    /// World point into camera coordinates.
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.matrix() * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.matrix() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt.matrix() * self.translation) }
    }

    /// Principal (optical) axis in world coordinates.
    pub fn principal_axis(&self) -> Vec3 {
        self.rotation.matrix().row(2).transpose()
    }
}

/// Rotation whose camera looks from `eye` toward `target`, with world `up`
/// projecting to image-up (camera −y).
pub fn look_at_rotation(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<Rotation3, GeometryError> {
    let forward = target - eye;
    let fnorm = forward.norm();
    if fnorm == 0.0 {
        return Err(GeometryError::InvalidInput("look-at target coincides with eye".into()));
    }
    let z = forward / fnorm;
    let right = z.cross(up);
    let rnorm = right.norm();
    if rnorm < 1e-12 {
        return Err(GeometryError::InvalidInput("look-at direction parallel to up".into()));
    }
    let x = right / rnorm;
    let y = z.cross(&x);
    Ok(Rotation3(Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])))
}

/// Nadir camera: principal axis along world −z, image x along world +x.
pub fn nadir_rotation() -> Rotation3 {
    Rotation3(Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Centered principal point with the given horizontal field of view.
    pub fn from_hfov(hfov: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        if !(hfov > 0.0 && hfov < PI) {
            return Err(GeometryError::InvalidInput(format!("horizontal fov {hfov} outside (0, π)")));
        }
        let f = width as f64 / (2.0 * (hfov / 2.0).tan());
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::InvalidInput("focal lengths must be positive".into()));
        }
        if !(0.0..=self.width as f64).contains(&self.cx) || !(0.0..=self.height as f64).contains(&self.cy) {
            return Err(GeometryError::InvalidInput("principal point outside the image".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidInput("empty image".into()));
        }
        Ok(())
    }

    /// (horizontal, vertical) field of view in radians.
    pub fn fov(&self) -> [f64; 2] {
        [
            2.0 * (self.width as f64 / (2.0 * self.fx)).atan(),
            2.0 * (self.height as f64 / (2.0 * self.fy)).atan(),
        ]
    }

    /// Same camera resampled to a new raster size.
    pub fn scaled_to(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy, width, height }
    }

    /// Camera-frame ray direction (z = 1) through pixel coordinates `(u, v)`.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Projects a camera-frame point; `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// 9-dim camera encoding: quaternion, translation and (h, v) field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraVector9 {
    pub q: UnitQuaternion,
    pub t: [f64; 3],
    pub fov: [f64; 2],
}

impl CameraVector9 {
    pub fn new(q: UnitQuaternion, t: [f64; 3], fov: [f64; 2]) -> Result<Self, GeometryError> {
        if fov.iter().any(|f| !(*f > 0.0 && *f < PI)) {
            return Err(GeometryError::InvalidInput(format!("fov {fov:?} outside (0, π)")));
        }
        Ok(Self { q, t, fov })
    }

    pub fn from_pose(pose: &Pose, k: &CameraIntrinsics) -> Self {
        Self {
            q: rotation_to_quat(&pose.rotation),
            t: pose.translation.into(),
            fov: k.fov(),
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        let [w, x, y, z] = self.q.wxyz();
        [w, x, y, z, self.t[0], self.t[1], self.t[2], self.fov[0], self.fov[1]]
    }

    pub fn pose(&self) -> Pose {
        Pose::from_quat(&self.q, Vec3::from(self.t))
    }
}

/// `y ≈ scale · R · x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Rotation3,
    pub translation: Vec3,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Rotation3::identity(), translation: Vec3::zeros() }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.scale * (self.rotation.matrix() * x) + self.translation
    }

    /// Weighted sum of squared residuals `Σ w‖s·R·x + t − y‖²`.
    pub fn weighted_residual(&self, x: &[Vec3], y: &[Vec3], w: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .zip(w)
            .map(|((xi, yi), wi)| wi * (self.apply(xi) - yi).norm_squared())
            .sum()
    }
}

/// Normalized geodesic distance between two rotations, in [0, 1].
pub fn rotation_geodesic_distance(r1: &Rotation3, r2: &Rotation3) -> f64 {
    let rel = r1.transpose() * *r2;
    rel.angle() / PI
}

/// `d_R + λ_t·‖t1 − t2‖`.
pub fn pair_distance(p1: &Pose, p2: &Pose, lambda_t: f64) -> Result<f64, GeometryError> {
    if !(lambda_t >= 0.0) || !lambda_t.is_finite() {
        return Err(GeometryError::InvalidInput(format!("lambda_t must be ≥ 0, got {lambda_t}")));
    }
    Ok(rotation_geodesic_distance(&p1.rotation, &p2.rotation)
        + lambda_t * (p1.translation - p2.translation).norm())
}

/// Transform from camera-i coordinates to camera-j coordinates.
pub fn relative_pose(p_i: &Pose, p_j: &Pose) -> Pose {
    let r_rel = p_j.rotation * p_i.rotation.transpose();
    Pose { rotation: r_rel, translation: p_j.translation - r_rel.matrix() * p_i.translation }
}

pub fn rotation_error_deg(pred_rel: &Rotation3, gt_rel: &Rotation3) -> f64 {
    180.0 * rotation_geodesic_distance(pred_rel, gt_rel)
}

/// Angle between translation directions in degrees. Two zero vectors give
/// 0°, exactly one zero vector gives 180°.
pub fn translation_direction_error_deg(pred_t: &Vec3, gt_t: &Vec3) -> f64 {
    let (np, ng) = (pred_t.norm(), gt_t.norm());
    match (np == 0.0, ng == 0.0) {
        (true, true) => 0.0,
        (true, false) | (false, true) => 180.0,
        (false, false) => {
            let (a, b) = (pred_t / np, gt_t / ng);
            a.cross(&b).norm().atan2(a.dot(&b)).to_degrees()
        }
    }
}

/// Weighted Umeyama fit of `(s, R, t)` minimizing `Σ w_k‖s·R·x_k + t − y_k‖²`.
///
/// Needs at least three correspondences and a weighted cross-covariance of
/// rank ≥ 2; the reflection case is corrected so `det R = +1`.
pub fn weighted_similarity_procrustes(
    x: &[Vec3],
    y: &[Vec3],
    w: &[f64],
) -> Result<SimilarityTransform, GeometryError> {
    if x.len() != y.len() || x.len() != w.len() {
        return Err(GeometryError::InvalidInput(format!(
            "length mismatch: |x|={}, |y|={}, |w|={}",
            x.len(),
            y.len(),
            w.len()
        )));
    }
    if x.len() < 3 {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "need at least 3 correspondences, got {}",
            x.len()
        )));
    }
    if w.iter().any(|wi| !(*wi >= 0.0) || !wi.is_finite()) {
        return Err(GeometryError::InvalidInput("weights must be finite and nonnegative".into()));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(GeometryError::DegenerateConfiguration("weights sum to zero".into()));
    }

    let weighted_mean = |pts: &[Vec3]| pts.iter().zip(w).fold(Vec3::zeros(), |acc, (p, wi)| acc + p * *wi) / total;
    let mu_x = weighted_mean(x);
    let mu_y = weighted_mean(y);

    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for ((xi, yi), wi) in x.iter().zip(y).zip(w) {
        let dx = xi - mu_x;
        let dy = yi - mu_y;
        cov += (dy * dx.transpose()) * *wi;
        var_x += wi * dx.norm_squared();
    }
    cov /= total;
    var_x /= total;
    if var_x <= f64::EPSILON * mu_x.norm_squared().max(1.0) {
        return Err(GeometryError::DegenerateConfiguration("source points coincide under the weights".into()));
    }

    let svd = cov.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(GeometryError::DegenerateConfiguration("SVD did not converge".into())),
    };
    // nalgebra sorts singular values in descending order.
    let d = svd.singular_values;
    if d[1] <= 1e-12 * d[0].max(f64::MIN_POSITIVE) {
        return Err(GeometryError::DegenerateConfiguration(
            "weighted cross-covariance has rank < 2".into(),
        ));
    }
    let sign = if (u.determinant() * v_t.determinant()) < 0.0 { -1.0 } else { 1.0 };
    let s_diag = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, sign));
    let r = u * s_diag * v_t;
    let scale = (d[0] + d[1] + sign * d[2]) / var_x;
    let t = mu_y - scale * (r * mu_x);
    Ok(SimilarityTransform { scale, rotation: Rotation3(r), translation: t })
}
