use serde::{Deserialize, Serialize};

use super::vec3::{self, Vec3};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Rotation quaternion stored as `(w, x, y, z)`.
///
/// Constructors normalize, so a `Quaternion` obtained through [`Quaternion::new`],
/// [`Quaternion::from_axis_angle`] or [`compose_quaternions`] is unit-norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quaternion<T> {
    pub fn identity() -> Self {
        Self {
            w: T::one(),
            x: T::zero(),
            y: T::zero(),
            z: T::zero(),
        }
    }

    /// Normalizing constructor.
    pub fn new(w: T, x: T, y: T, z: T) -> Result<Self> {
        Self::from_raw(w, x, y, z).normalized()
    }

    /// Stores the components verbatim, without normalization.
    pub const fn from_raw(w: T, x: T, y: T, z: T) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(q: [T; 4]) -> Result<Self> {
        Self::new(q[0], q[1], q[2], q[3])
    }

    pub fn to_array(self) -> [T; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3<T>, angle: T) -> Result<Self> {
        let n = vec3::norm(axis);
        if !(n > T::zero()) || !n.is_finite() || !angle.is_finite() {
            return Err(Error::DegenerateRotation);
        }
        let half = angle * T::lit(0.5);
        let s = half.sin() / n;
        Self::new(half.cos(), axis[0] * s, axis[1] * s, axis[2] * s)
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !n.is_finite() || n <= T::zero() {
            return Err(Error::DegenerateRotation);
        }
        Ok(Self::from_raw(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    pub fn conjugate(self) -> Self {
        Self::from_raw(self.w, -self.x, -self.y, -self.z)
    }

    pub fn negated(self) -> Self {
        Self::from_raw(-self.w, -self.x, -self.y, -self.z)
    }

    /// Representative with `w >= 0`.
    pub fn canonical(self) -> Self {
        if self.w < T::zero() {
            self.negated()
        } else {
            self
        }
    }

    /// Hamilton product without renormalization.
    pub fn hamilton(self, b: Self) -> Self {
        let a = self;
        Self::from_raw(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    /// Rotates `v`, assuming `self` is unit-norm.
    #[inline]
    pub fn rotate(&self, v: Vec3<T>) -> Vec3<T> {
        let u = [self.x, self.y, self.z];
        let two = T::lit(2.0);
        let t = vec3::scale(vec3::cross(u, v), two);
        vec3::add(vec3::add(v, vec3::scale(t, self.w)), vec3::cross(u, t))
    }

    /// Rotation matrix of the (assumed unit) quaternion.
    pub fn to_matrix(&self) -> [[T; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let one = T::one();
        let two = T::lit(2.0);
        [
            [
                one - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                one - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                one - two * (x * x + y * y),
            ],
        ]
    }

    pub fn cast<U: Real>(self) -> Quaternion<U> {
        Quaternion::from_raw(
            U::lit(self.w.to_f64_lossy()),
            U::lit(self.x.to_f64_lossy()),
            U::lit(self.y.to_f64_lossy()),
            U::lit(self.z.to_f64_lossy()),
        )
    }
}

/// Rotates `v` by `q`, normalizing `q` first.
pub fn rotate_by_quaternion<T: Real>(q: Quaternion<T>, v: Vec3<T>) -> Result<Vec3<T>> {
    Ok(q.normalized()?.rotate(v))
}

/// Hamilton product `a * b`, renormalized. Rotating by the result applies `b` first.
pub fn compose_quaternions<T: Real>(a: Quaternion<T>, b: Quaternion<T>) -> Result<Quaternion<T>> {
    a.hamilton(b).normalized()
}
