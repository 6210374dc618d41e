//! Rotation and translation representations, Euler/quaternion conversions,
//! and the pose error metrics used by the evaluation harness.
//!
//! Two Euler-to-quaternion routes are provided. The standard route composes
//! three axis rotations under an explicit convention and is the production
//! default. The legacy route evaluates a fixed half-angle expansion kept for
//! comparison with the reference results this toolkit mirrors; it is partial
//! (it can hit a negative radicand or a vanishing scalar part) and is selected
//! only through [`RotationConvention::Legacy`].

use std::f64::consts::{PI, TAU};
use std::fmt;

/// Scalar-part threshold below which the legacy conversion is rejected.
pub const LEGACY_SINGULAR_EPS: f64 = 1e-6;

/// Conversion failures of the legacy Euler-to-quaternion route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeometryError {
    /// The radicand of the scalar-part square root is negative.
    NegativeRadicand { radicand: f64 },
    /// The scalar part is too small to divide by.
    SingularConversion { scalar: f64 },
}

impl fmt::Display for GeometryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeometryError::NegativeRadicand { radicand } => {
                write!(f, "negative radicand {radicand:e} in euler-to-quaternion conversion")
            }
            GeometryError::SingularConversion { scalar } => {
                write!(f, "scalar part {scalar:e} below {LEGACY_SINGULAR_EPS:e}; conversion singular")
            }
        }
    }
}

impl std::error::Error for GeometryError {}

/// Axis order for the standard Euler-angle conversions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EulerConvention {
    /// Intrinsic Z-Y'-X'': yaw about Z, then pitch, then roll.
    IntrinsicZyx,
    /// Intrinsic X-Y'-Z'': roll about X, then pitch, then yaw.
    IntrinsicXyz,
}

/// Which Euler-to-quaternion route the pipeline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationConvention {
    Standard(EulerConvention),
    /// Fixed half-angle expansion kept for comparison runs; partial.
    Legacy,
}

impl Default for RotationConvention {
    fn default() -> Self {
        RotationConvention::Standard(EulerConvention::IntrinsicZyx)
    }
}

/// Wraps an angle into the canonical range (-pi, pi].
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Rotation ground truth as roll/pitch/yaw, radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl EulerAngles {
    pub fn new(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self { roll, pitch, yaw }
    }

    /// All three angles wrapped into (-pi, pi].
    pub fn canonicalized(self) -> Self {
        Self {
            roll: wrap_angle(self.roll),
            pitch: wrap_angle(self.pitch),
            yaw: wrap_angle(self.yaw),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.roll.is_finite() && self.pitch.is_finite() && self.yaw.is_finite()
    }
}

/// Unit quaternion; `w` is the scalar part. `q` and `-q` encode the same rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Scaled to unit length. A zero quaternion is returned unchanged; callers
    /// that can encounter it must check [`Quaternion::norm`] first.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return *self;
        }
        Self { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    pub fn dot(&self, other: &Quaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn negated(&self) -> Self {
        Self { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self * other` (apply `other` first).
    pub fn multiply(&self, other: &Quaternion) -> Self {
        let (w1, x1, y1, z1) = (self.w, self.x, self.y, self.z);
        let (w2, x2, y2, z2) = (other.w, other.x, other.y, other.z);
        Self {
            w: w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            x: w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            y: w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            z: w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        }
    }

    fn about_x(angle: f64) -> Self {
        Self::new((angle / 2.0).cos(), (angle / 2.0).sin(), 0.0, 0.0)
    }

    fn about_y(angle: f64) -> Self {
        Self::new((angle / 2.0).cos(), 0.0, (angle / 2.0).sin(), 0.0)
    }

    fn about_z(angle: f64) -> Self {
        Self::new((angle / 2.0).cos(), 0.0, 0.0, (angle / 2.0).sin())
    }

    /// Row-major 3x3 rotation matrix of a unit quaternion.
    pub fn to_rotation_matrix(&self) -> [[f64; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

/// Translation in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Translation {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Translation {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// 6-DoF pose: translation plus unit quaternion, seven scalars when flattened.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub translation: Translation,
    pub quaternion: Quaternion,
}

impl Pose {
    pub fn new(translation: Translation, quaternion: Quaternion) -> Self {
        Self { translation, quaternion }
    }

    /// The 7-coordinate regression layout `[tx, ty, tz, qw, qx, qy, qz]`.
    pub fn to_vector(&self) -> [f64; 7] {
        let t = self.translation.as_array();
        let q = self.quaternion.as_array();
        [t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
    }

    pub fn from_vector(v: &[f64]) -> Self {
        assert_eq!(v.len(), 7, "pose vector must have 7 coordinates");
        Self {
            translation: Translation::new(v[0], v[1], v[2]),
            quaternion: Quaternion::new(v[3], v[4], v[5], v[6]),
        }
    }
}

/// Euler angles recovered from a quaternion, with a gimbal-lock indicator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerDecomposition {
    pub angles: EulerAngles,
    /// Set when |pitch| is within 1e-7 of pi/2; roll/yaw are then degenerate
    /// and reported with yaw fixed to zero.
    pub gimbal_lock: bool,
}

/// Legacy Euler-to-quaternion route: a fixed half-angle expansion evaluated
/// literally, then normalized. Partial: rejects a negative radicand and a
/// scalar part below [`LEGACY_SINGULAR_EPS`].
pub fn euler_to_quaternion_legacy(e: EulerAngles) -> Result<Quaternion, GeometryError> {
    let c1 = (e.roll / 2.0).cos();
    let c2 = (e.yaw / 2.0).cos();
    let c3 = (e.pitch / 2.0).cos();
    let s1 = (e.roll / 2.0).sin();
    let s2 = (e.yaw / 2.0).sin();
    let s3 = (e.pitch / 2.0).sin();

    let radicand = 1.0 + c1 * c2 + c1 * c3 - s1 * s2 * s3 + c2 * c3;
    if radicand < 0.0 {
        return Err(GeometryError::NegativeRadicand { radicand });
    }
    let x0 = radicand.sqrt() / 2.0;
    if x0 < LEGACY_SINGULAR_EPS {
        return Err(GeometryError::SingularConversion { scalar: x0 });
    }
    let y1 = (c2 * s3 + c1 * s3 + s1 * s2 * c3) / (4.0 * x0);
    let y2 = (s1 * c2 + s1 * c3 + c1 * s2 * s3) / (4.0 * x0);
    let y3 = (-s1 * s3 + c1 * s2 * c3 + s2) / (4.0 * x0);
    Ok(Quaternion::new(x0, y1, y2, y3).normalized())
}

/// Standard Euler-to-quaternion conversion: the product of three axis
/// rotations in the order given by `convention`. Total function.
pub fn euler_to_quaternion_standard(e: EulerAngles, convention: EulerConvention) -> Quaternion {
    let qx = Quaternion::about_x(e.roll);
    let qy = Quaternion::about_y(e.pitch);
    let qz = Quaternion::about_z(e.yaw);
    let q = match convention {
        EulerConvention::IntrinsicZyx => qz.multiply(&qy).multiply(&qx),
        EulerConvention::IntrinsicXyz => qx.multiply(&qy).multiply(&qz),
    };
    q.normalized()
}

/// Euler-to-quaternion under the pipeline-selected route.
pub fn euler_to_quaternion(
    e: EulerAngles,
    convention: RotationConvention,
) -> Result<Quaternion, GeometryError> {
    match convention {
        RotationConvention::Standard(c) => Ok(euler_to_quaternion_standard(e, c)),
        RotationConvention::Legacy => euler_to_quaternion_legacy(e),
    }
}

fn axis_matrix_x(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn axis_matrix_y(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn axis_matrix_z(a: f64) -> [[f64; 3]; 3] {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Row-major product `a * b` of 3x3 matrices.
pub fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

/// Rotation matrix of the Euler angles under `convention`.
pub fn rotation_matrix_from_euler(e: EulerAngles, convention: EulerConvention) -> [[f64; 3]; 3] {
    let rx = axis_matrix_x(e.roll);
    let ry = axis_matrix_y(e.pitch);
    let rz = axis_matrix_z(e.yaw);
    match convention {
        EulerConvention::IntrinsicZyx => mat3_mul(&mat3_mul(&rz, &ry), &rx),
        EulerConvention::IntrinsicXyz => mat3_mul(&mat3_mul(&rx, &ry), &rz),
    }
}

const GIMBAL_EPS: f64 = 1e-7;

/// Recovers Euler angles from a unit quaternion under `convention`.
///
/// Near gimbal lock the decomposition is not unique; yaw is reported as zero,
/// the combined angle goes to roll, and `gimbal_lock` is set.
pub fn quaternion_to_euler(q: &Quaternion, convention: EulerConvention) -> EulerDecomposition {
    let m = q.normalized().to_rotation_matrix();
    match convention {
        EulerConvention::IntrinsicZyx => {
            let sin_pitch = (-m[2][0]).clamp(-1.0, 1.0);
            let pitch = sin_pitch.asin();
            if (PI / 2.0 - pitch.abs()) <= GIMBAL_EPS {
                // m[0][1] = sin(roll -/+ yaw)*sign terms collapse; fold into roll.
                let roll = if pitch > 0.0 {
                    m[0][1].atan2(m[0][2])
                } else {
                    (-m[0][1]).atan2(-m[0][2])
                };
                EulerDecomposition {
                    angles: EulerAngles::new(wrap_angle(roll), pitch, 0.0),
                    gimbal_lock: true,
                }
            } else {
                EulerDecomposition {
                    angles: EulerAngles::new(
                        m[2][1].atan2(m[2][2]),
                        pitch,
                        m[1][0].atan2(m[0][0]),
                    ),
                    gimbal_lock: false,
                }
            }
        }
        EulerConvention::IntrinsicXyz => {
            let sin_pitch = m[0][2].clamp(-1.0, 1.0);
            let pitch = sin_pitch.asin();
            if (PI / 2.0 - pitch.abs()) <= GIMBAL_EPS {
                let folded = m[1][0].atan2(m[1][1]);
                let roll = if pitch > 0.0 { folded } else { -folded };
                EulerDecomposition {
                    angles: EulerAngles::new(wrap_angle(roll), pitch, 0.0),
                    gimbal_lock: true,
                }
            } else {
                EulerDecomposition {
                    angles: EulerAngles::new(
                        (-m[1][2]).atan2(m[2][2]),
                        pitch,
                        (-m[0][1]).atan2(m[0][0]),
                    ),
                    gimbal_lock: false,
                }
            }
        }
    }
}

/// Returns `q` or `-q`, whichever has a non-negative dot product with `reference`.
pub fn sign_align(reference: &Quaternion, q: &Quaternion) -> Quaternion {
    if reference.dot(q) < 0.0 {
        q.negated()
    } else {
        *q
    }
}

/// Euclidean distance between two translations, meters.
pub fn translation_error_m(pred: &Translation, gt: &Translation) -> f64 {
    let dx = pred.x - gt.x;
    let dy = pred.y - gt.y;
    let dz = pred.z - gt.z;
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Geodesic angle between two unit quaternions, degrees in [0, 180]:
/// `2*acos(clamp(|<pred, gt>|, 0, 1)) * 180/pi`.
///
/// Sign-invariant: `q` and `-q` compare equal. Dot products within 1e-12 of
/// one are treated as exactly one, so the error of a quaternion against its
/// own negation is exactly zero; this floors the metric at roughly 1e-4
/// degrees, far below any pose error of interest.
pub fn rotation_error_deg(pred: &Quaternion, gt: &Quaternion) -> f64 {
    let d = pred.dot(gt).abs().clamp(0.0, 1.0);
    if d > 1.0 - 1e-12 {
        return 0.0;
    }
    2.0 * d.acos() * 180.0 / PI
}
