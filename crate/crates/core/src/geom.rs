//! Minimal rigid-body geometry: unit quaternions and 3-vectors.

use serde::{Deserialize, Serialize};

/// Tolerance on `|q| - 1` accepted for a unit quaternion.
pub const UNIT_TOLERANCE: f64 = 1e-6;

pub type Vec3 = [f64; 3];

/// Rotation quaternion stored as `(w, x, y, z)`, global-from-local.
///
/// Serialized as the JSON array `[w, x, y, z]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl From<[f64; 4]> for Quaternion {
    fn from(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

impl From<Quaternion> for [f64; 4] {
    fn from(q: Quaternion) -> Self {
        [q.w, q.x, q.y, q.z]
    }
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    /// Rotation of `yaw` radians about the global z axis.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = (yaw / 2.0).sin_cos();
        Self::new(c, 0.0, 0.0, s)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_unit(&self) -> bool {
        self.norm().is_finite() && (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    pub fn normalized(&self) -> Self {
        let n = self.norm();
        Self::new(self.w / n, self.x / n, self.y / n, self.z / n)
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(&self, rhs: &Quaternion) -> Self {
        let (a, b) = (self, rhs);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Row-major rotation matrix. Assumes a unit quaternion.
    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        let Quaternion { w, x, y, z } = *self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// `R v`
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        mat_vec(&self.rotation_matrix(), v)
    }

    /// `R^T v`
    pub fn inverse_rotate(&self, v: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation_matrix(), v)
    }
}

pub fn mat_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_t_vec(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Euclidean distance in the x-y plane.
pub fn planar_distance(a: Vec3, b: Vec3) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Wraps an angle in degrees to `(-180, 180]`.
pub fn wrap_degrees(deg: f64) -> f64 {
    let mut w = deg % 360.0;
    if w <= -180.0 {
        w += 360.0;
    } else if w > 180.0 {
        w -= 360.0;
    }
    w
}

/// Wraps an angle in radians to `(-pi, pi]`.
pub fn wrap_radians(rad: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = rad % two_pi;
    if w <= -std::f64::consts::PI {
        w += two_pi;
    } else if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn hamilton_product_composes_yaws() {
        let q = Quaternion::from_yaw(0.3).mul(&Quaternion::from_yaw(0.4));
        let r = Quaternion::from_yaw(0.7);
        assert_abs_diff_eq!(q.w, r.w, epsilon = 1e-12);
        assert_abs_diff_eq!(q.z, r.z, epsilon = 1e-12);
    }

    #[test]
    fn wrap_degrees_half_open() {
        assert_eq!(wrap_degrees(180.0), 180.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_eq!(wrap_degrees(340.0), -20.0);
        assert_eq!(wrap_degrees(-340.0), 20.0);
        assert_eq!(wrap_degrees(0.0), 0.0);
    }

    #[test]
    fn serde_as_wxyz_array() {
        let q = Quaternion::new(1.0, 0.0, 0.0, 0.0);
        assert_eq!(serde_json::to_string(&q).unwrap(), "[1.0,0.0,0.0,0.0]");
    }
}
