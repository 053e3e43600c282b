//! Rotation algebra for instrument orientation streams.
//!
//! Rotation matrices are stored row-major; their columns are the body axes
//! x̂, ŷ, ẑ expressed in the world frame. Quaternions are Hamilton quaternions
//! with the scalar part first, `[q1, q2, q3, q4]`, and are kept in the
//! canonical hemisphere (`q1 >= 0`).

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Smallest singular value accepted by [`orthogonalize`].
pub const RANK_TOLERANCE: f64 = 1e-9;

/// Arc angle (rad) below which [`slerp`] falls back to normalized lerp.
pub const SLERP_LERP_THRESHOLD: f64 = 1e-7;

pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// A proper rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix(Mat3);

impl RotationMatrix {
    pub const IDENTITY: RotationMatrix = RotationMatrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Wraps a matrix the caller knows to be a rotation. No check is made.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        RotationMatrix(m)
    }

    pub fn as_array(&self) -> &Mat3 {
        &self.0
    }

    /// Column `i` of the matrix: 0 → x̂, 1 → ŷ, 2 → ẑ.
    pub fn column(&self, i: usize) -> Vec3 {
        [self.0[0][i], self.0[1][i], self.0[2][i]]
    }

    pub fn x_axis(&self) -> Vec3 {
        self.column(0)
    }

    pub fn transform(&self, v: &Vec3) -> Vec3 {
        let m = &self.0;
        [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
    }

    pub fn transpose(&self) -> RotationMatrix {
        let m = &self.0;
        RotationMatrix([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn compose(&self, other: &RotationMatrix) -> RotationMatrix {
        let (a, b) = (&self.0, &other.0);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        RotationMatrix(out)
    }
}

/// Frobenius-nearest proper rotation to a noisy 3×3 matrix.
///
/// Computes `U · diag(1, 1, det(U Vᵀ)) · Vᵀ` from the SVD of `noisy`, flipping
/// the singular direction paired with the smallest singular value when the
/// plain polar factor would be a reflection.
pub fn orthogonalize(noisy: &Mat3) -> Result<RotationMatrix> {
    orthogonalize_sample(noisy, None)
}

/// Like [`orthogonalize`], tagging any degenerate-frame error with `sample`.
pub fn orthogonalize_sample(noisy: &Mat3, sample: Option<usize>) -> Result<RotationMatrix> {
    let m = Matrix3::from_fn(|i, j| noisy[i][j]);
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateFrame {
            sample,
            sigma_min: f64::NAN,
        });
    }
    let svd = m.svd(true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::DegenerateFrame {
            sample,
            sigma_min: f64::NAN,
        });
    };
    let sigma = svd.singular_values;
    let (k_min, sigma_min) = sigma
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, s)| if s < acc.1 { (i, s) } else { acc });
    if sigma_min <= RANK_TOLERANCE {
        return Err(Error::DegenerateFrame { sample, sigma_min });
    }
    if (u * v_t).determinant() < 0.0 {
        let mut col = u.column_mut(k_min);
        col *= -1.0;
    }
    let r = u * v_t;
    Ok(RotationMatrix(std::array::from_fn(|i| {
        std::array::from_fn(|j| r[(i, j)])
    })))
}

/// Unit quaternion `[q1, q2, q3, q4]`, scalar first, canonical sign.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitQuaternion([f64; 4]);

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion([1.0, 0.0, 0.0, 0.0]);

    /// Normalizes and canonicalizes four raw components.
    ///
    /// Returns `None` for a zero or non-finite input.
    pub fn new(q: [f64; 4]) -> Option<Self> {
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return None;
        }
        Some(UnitQuaternion(canonical(q.map(|c| c / n))))
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = norm(axis);
        if n == 0.0 || angle == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle / 2.0).sin_cos();
        let k = scale(axis, s / n);
        Self::new([c, k[0], k[1], k[2]]).unwrap_or(Self::IDENTITY)
    }

    pub fn components(&self) -> [f64; 4] {
        self.0
    }

    /// Scalar part `q1`.
    pub fn scalar(&self) -> f64 {
        self.0[0]
    }

    pub fn vector(&self) -> Vec3 {
        [self.0[1], self.0[2], self.0[3]]
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn conjugate(&self) -> Self {
        let [w, x, y, z] = self.0;
        UnitQuaternion([w, -x, -y, -z])
    }

    /// Hamilton product `self · rhs`, renormalized and canonicalized.
    pub fn mul(&self, rhs: &UnitQuaternion) -> Self {
        let p = hamilton(&self.0, &rhs.0);
        Self::new(p).unwrap_or(Self::IDENTITY)
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        let w = self.0[0];
        let u = self.vector();
        // v' = v + 2w(u×v) + 2u×(u×v)
        let t = scale(&cross(&u, v), 2.0);
        add(&add(v, &scale(&t, w)), &cross(&u, &t))
    }

    pub fn to_rotation_matrix(&self) -> RotationMatrix {
        let [w, x, y, z] = self.0;
        RotationMatrix([
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ])
    }
}

fn hamilton(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Picks the representative whose first nonzero component is positive.
fn canonical(q: [f64; 4]) -> [f64; 4] {
    match q.iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => q.map(|c| -c),
        _ => q,
    }
}

/// Converts a rotation matrix to its canonical unit quaternion.
pub fn to_quaternion(r: &RotationMatrix) -> UnitQuaternion {
    let m = &r.0;
    let trace = m[0][0] + m[1][1] + m[2][2];
    let q = if trace >= m[0][0] && trace >= m[1][1] && trace >= m[2][2] {
        let w = (1.0 + trace).max(0.0).sqrt() / 2.0;
        let f = 4.0 * w;
        [
            w,
            (m[2][1] - m[1][2]) / f,
            (m[0][2] - m[2][0]) / f,
            (m[1][0] - m[0][1]) / f,
        ]
    } else if m[0][0] >= m[1][1] && m[0][0] >= m[2][2] {
        let x = (1.0 + m[0][0] - m[1][1] - m[2][2]).max(0.0).sqrt() / 2.0;
        let f = 4.0 * x;
        [
            (m[2][1] - m[1][2]) / f,
            x,
            (m[0][1] + m[1][0]) / f,
            (m[0][2] + m[2][0]) / f,
        ]
    } else if m[1][1] >= m[2][2] {
        let y = (1.0 - m[0][0] + m[1][1] - m[2][2]).max(0.0).sqrt() / 2.0;
        let f = 4.0 * y;
        [
            (m[0][2] - m[2][0]) / f,
            (m[0][1] + m[1][0]) / f,
            y,
            (m[1][2] + m[2][1]) / f,
        ]
    } else {
        let z = (1.0 - m[0][0] - m[1][1] + m[2][2]).max(0.0).sqrt() / 2.0;
        let f = 4.0 * z;
        [
            (m[1][0] - m[0][1]) / f,
            (m[0][2] + m[2][0]) / f,
            (m[1][2] + m[2][1]) / f,
            z,
        ]
    };
    UnitQuaternion::new(q).unwrap_or(UnitQuaternion::IDENTITY)
}

/// Rotation between two consecutive orientations, as axis and angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationDelta {
    pub axis: Vec3,
    /// Radians, in `[0, π]`.
    pub angle: f64,
}

/// `ΔQ = Q_next · Q_prev⁻¹`, reduced to the shortest rotation.
pub fn relative_rotation(prev: &UnitQuaternion, next: &UnitQuaternion) -> RotationDelta {
    let mut dq = hamilton(&next.0, &prev.conjugate().0);
    if dq[0] < 0.0 {
        dq = dq.map(|c| -c);
    }
    let v = [dq[1], dq[2], dq[3]];
    let s = norm(&v);
    // Same angle as 2·acos(q1) on the unit sphere, without the loss of
    // precision acos suffers near q1 = 1.
    let angle = 2.0 * s.atan2(dq[0].max(0.0));
    let axis = if angle > 1e-12 && s > 0.0 {
        scale(&v, 1.0 / s)
    } else {
        [1.0, 0.0, 0.0]
    };
    RotationDelta {
        axis,
        angle: angle.clamp(0.0, std::f64::consts::PI),
    }
}

/// Angle-only shortcut for [`relative_rotation`].
pub fn rotation_angle(prev: &UnitQuaternion, next: &UnitQuaternion) -> f64 {
    relative_rotation(prev, next).angle
}

/// Spherical linear interpolation along the shortest arc, `u ∈ [0, 1]`.
pub fn slerp(a: &UnitQuaternion, b: &UnitQuaternion, u: f64) -> UnitQuaternion {
    let qa = a.0;
    let mut qb = b.0;
    let d: f64 = qa.iter().zip(&qb).map(|(x, y)| x * y).sum();
    if d < 0.0 {
        qb = qb.map(|c| -c);
    }
    let diff = (0..4).map(|i| (qa[i] - qb[i]).powi(2)).sum::<f64>().sqrt();
    let sum = (0..4).map(|i| (qa[i] + qb[i]).powi(2)).sum::<f64>().sqrt();
    // half of the 4D angle between qa and qb; the rotation arc is 4× this
    let half = diff.atan2(sum);
    let omega = 2.0 * half;
    let q: [f64; 4] = if 2.0 * omega < SLERP_LERP_THRESHOLD {
        std::array::from_fn(|i| (1.0 - u) * qa[i] + u * qb[i])
    } else {
        let s = omega.sin();
        let wa = ((1.0 - u) * omega).sin() / s;
        let wb = (u * omega).sin() / s;
        std::array::from_fn(|i| wa * qa[i] + wb * qb[i])
    };
    UnitQuaternion::new(q).unwrap_or(*a)
}
