//! Quaternion and 6-DoF pose arithmetic.
//!
//! Conventions used everywhere in the crate:
//!
//! * Quaternions are Hamilton quaternions `(w, x, y, z)`, canonicalized to
//!   `w >= 0` after every normalizing operation.
//! * Euler angles are ZYX intrinsic: yaw about world up (`z`), then pitch
//!   about the rotated `y`, then roll about the camera optical axis (`x`).
//! * A camera looks along its body `-x` axis with `+y` to the right of the
//!   image and `+z` up, so a positive roll rotates the image content
//!   clockwise. This is what makes [`ImageRotation`] and
//!   [`rotate_raster`](crate::synth::rotate_raster) agree.
//! * Relative poses express the second pose in the camera frame of the first.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = [f64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate quaternion (norm {0:e})")]
    DegenerateQuaternion(f64),
    #[error("image rotation must be one of 0, 90, 180, 270 degrees (got {0})")]
    InvalidRotation(i64),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("non-finite pose component")]
    NonFinite,
}

const MIN_NORM: f64 = 1e-12;

/// Unit quaternion `(w, x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl fmt::Display for Quaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.w, self.x, self.y, self.z)
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Scales to unit norm and flips the sign so that `w >= 0`.
    pub fn normalize(self) -> Result<Self, GeometryError> {
        let n = self.norm();
        if !(n > MIN_NORM) || !n.is_finite() {
            return Err(GeometryError::DegenerateQuaternion(n));
        }
        if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            return Ok(self.canonical());
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n).canonical())
    }

    /// Resolves the double cover: returns `-q` when `w < 0`.
    pub fn canonical(self) -> Self {
        if self.w < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Inverse of a unit quaternion (its conjugate), canonicalized.
    pub fn inverse(self) -> Self {
        self.conjugate().canonical()
    }

    fn hamilton(a: &Quaternion, b: &Quaternion) -> Quaternion {
        Quaternion::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Hamilton product `self ⊗ rhs`: rotates by `rhs` first, then by `self`.
    /// The result is renormalized and canonicalized; degenerate products are
    /// returned unnormalized.
    pub fn compose(&self, rhs: &Quaternion) -> Quaternion {
        let p = Self::hamilton(self, rhs);
        p.normalize().unwrap_or(p)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self, GeometryError> {
        let n = norm3(axis);
        if !(n > MIN_NORM) {
            return Err(GeometryError::DegenerateQuaternion(n));
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n).normalize()
    }

    /// Rotation vector (axis times angle) with angle in `[0, π]`.
    pub fn to_rotation_vector(&self) -> Vec3 {
        let q = self.canonical();
        let v = [q.x, q.y, q.z];
        let s = norm3(v);
        if s < 1e-300 {
            return [0.0; 3];
        }
        let angle = 2.0 * s.atan2(q.w);
        scale3(v, angle / s)
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let m = self.rotation_matrix();
        mat_vec(&m, v)
    }

    pub fn inverse_rotate(&self, v: Vec3) -> Vec3 {
        let m = self.rotation_matrix();
        mat_t_vec(&m, v)
    }

    pub(crate) fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let Quaternion { w, x, y, z } = *self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// ZYX intrinsic decomposition.
    pub fn to_euler(&self) -> EulerDecomposition {
        let Quaternion { w, x, y, z } = *self;
        let sin_pitch = (2.0 * (w * y - z * x)).clamp(-1.0, 1.0);
        let pitch = sin_pitch.asin();
        let gimbal_lock = (FRAC_PI_2 - pitch.abs()) < 1e-6;
        let (yaw, roll) = if gimbal_lock {
            // Only yaw ∓ roll is observable; put all of it into yaw.
            ((-2.0 * (x * y - w * z)).atan2(1.0 - 2.0 * (x * x + z * z)), 0.0)
        } else {
            (
                (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z)),
                (2.0 * (w * x + y * z)).atan2(1.0 - 2.0 * (x * x + y * y)),
            )
        };
        EulerDecomposition {
            angles: EulerAngles { yaw: wrap_angle(yaw), pitch, roll: wrap_angle(roll) },
            gimbal_lock,
        }
    }

    pub fn from_euler(e: EulerAngles) -> Quaternion {
        let (sy, cy) = (e.yaw / 2.0).sin_cos();
        let (sp, cp) = (e.pitch / 2.0).sin_cos();
        let (sr, cr) = (e.roll / 2.0).sin_cos();
        Quaternion::new(
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        )
        .canonical()
    }

    /// Geodesic angle `2·acos|⟨a,b⟩|` in degrees.
    ///
    /// Evaluated as `2·atan2(|vec(a⁻¹b)|, |⟨a,b⟩|)`, which is the same angle
    /// for unit inputs but keeps full precision near zero.
    pub fn angular_distance_deg(&self, other: &Quaternion) -> f64 {
        let d = self.dot(other).abs().min(1.0);
        let rel = Self::hamilton(&self.conjugate(), other);
        let s = norm3([rel.x, rel.y, rel.z]);
        (2.0 * s.atan2(d)).to_degrees().clamp(0.0, 180.0)
    }
}

/// Yaw, pitch and roll in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    pub angles: EulerAngles,
    /// Set when `|pitch|` is within `1e-6` of `π/2`; the yaw/roll split is
    /// then a convention rather than a unique answer.
    pub gimbal_lock: bool,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    if r <= -PI {
        r += 2.0 * PI;
    }
    r
}

/// In-plane image rotation used by the rotation pretext task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageRotation {
    R0,
    R90,
    R180,
    R270,
}

impl ImageRotation {
    pub const ALL: [ImageRotation; 4] =
        [ImageRotation::R0, ImageRotation::R90, ImageRotation::R180, ImageRotation::R270];

    pub fn from_degrees(deg: i64) -> Result<Self, GeometryError> {
        match deg {
            0 => Ok(Self::R0),
            90 => Ok(Self::R90),
            180 => Ok(Self::R180),
            270 => Ok(Self::R270),
            other => Err(GeometryError::InvalidRotation(other)),
        }
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    pub fn index(self) -> usize {
        match self {
            Self::R0 => 0,
            Self::R90 => 1,
            Self::R180 => 2,
            Self::R270 => 3,
        }
    }

    pub fn degrees(self) -> i64 {
        self.index() as i64 * 90
    }

    pub fn radians(self) -> f64 {
        (self.degrees() as f64).to_radians()
    }
}

/// Camera pose: position in meters and unit orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub t: Vec3,
    pub q: Quaternion,
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose {
    pub const IDENTITY: Pose = Pose { t: [0.0; 3], q: Quaternion::IDENTITY };

    /// Builds a pose, normalizing and canonicalizing the orientation.
    pub fn new(t: Vec3, q: Quaternion) -> Result<Self, GeometryError> {
        if !t.iter().all(|v| v.is_finite()) || !q.is_finite() {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self { t, q: q.normalize()? })
    }

    /// Pose of `other` expressed in the camera frame of `self`.
    pub fn relative_to_frame(&self, other: &Pose) -> Pose {
        let q = self.q.inverse().compose(&other.q);
        let t = self.q.inverse_rotate(sub3(other.t, self.t));
        Pose { t, q }
    }

    /// Applies a pose given in the frame of `self`, the inverse of
    /// [`Pose::relative_to_frame`].
    pub fn compose(&self, rel: &Pose) -> Pose {
        Pose { t: add3(self.t, self.q.rotate(rel.t)), q: self.q.compose(&rel.q) }
    }

    /// Pose of the camera after rotating its image by `k`: position kept,
    /// roll advanced by `k`.
    pub fn rotate_image(&self, k: ImageRotation) -> Pose {
        if k == ImageRotation::R0 {
            return *self;
        }
        let mut e = self.q.to_euler().angles;
        e.roll = wrap_angle(e.roll + k.radians());
        Pose { t: self.t, q: Quaternion::from_euler(e) }
    }

    pub fn errors_against(&self, truth: &Pose) -> ErrorPair {
        ErrorPair {
            position_error: norm3(sub3(self.t, truth.t)),
            orientation_error: self.q.angular_distance_deg(&truth.q),
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.t[0], self.t[1], self.t[2], self.q.w, self.q.x, self.q.y, self.q.z]
    }
}

/// Free-function form of [`Pose::relative_to_frame`].
pub fn relative_pose(from: &Pose, to: &Pose) -> Pose {
    from.relative_to_frame(to)
}

/// Position error in meters and orientation error in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorPair {
    pub position_error: f64,
    pub orientation_error: f64,
}

impl fmt::Display for ErrorPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}/{:.2}", self.position_error, self.orientation_error)
    }
}

/// Median of a sample; even counts average the central pair.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Per-component medians over `(predicted, ground truth)` pairs.
pub fn median_errors(pairs: &[(Pose, Pose)]) -> Result<ErrorPair, GeometryError> {
    if pairs.is_empty() {
        return Err(GeometryError::Empty("median_errors needs at least one pair"));
    }
    let errs: Vec<ErrorPair> = pairs.iter().map(|(p, g)| p.errors_against(g)).collect();
    median_of_error_pairs(&errs)
}

pub fn median_of_error_pairs(errs: &[ErrorPair]) -> Result<ErrorPair, GeometryError> {
    let pos: Vec<f64> = errs.iter().map(|e| e.position_error).collect();
    let ori: Vec<f64> = errs.iter().map(|e| e.orientation_error).collect();
    match (median(&pos), median(&ori)) {
        (Some(position_error), Some(orientation_error)) => {
            Ok(ErrorPair { position_error, orientation_error })
        }
        _ => Err(GeometryError::Empty("no error pairs")),
    }
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

fn mat_t_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}
