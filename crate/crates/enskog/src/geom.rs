//! Small fixed-size vector type for positions, velocities and directions.

use std::ops::{Add, AddAssign, Div, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// A vector in 3-space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec3<T>(pub [T; 3]);

impl<T: Real> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Vec3([x, y, z])
    }

    pub fn zero() -> Self {
        Vec3([T::zero(); 3])
    }

    pub fn splat(v: T) -> Self {
        Vec3([v; 3])
    }

    pub fn from_f64(v: [f64; 3]) -> Self {
        Vec3([T::val(v[0]), T::val(v[1]), T::val(v[2])])
    }

    pub fn to_f64(self) -> [f64; 3] {
        [
            self.0[0].to_f64_lossy(),
            self.0[1].to_f64_lossy(),
            self.0[2].to_f64_lossy(),
        ]
    }

    pub fn dot(self, rhs: Self) -> T {
        self.0[0] * rhs.0[0] + self.0[1] * rhs.0[1] + self.0[2] * rhs.0[2]
    }

    pub fn norm_sq(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_sq().sqrt()
    }

    pub fn scale(self, s: T) -> Self {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    pub fn cross(self, rhs: Self) -> Self {
        Vec3([
            self.0[1] * rhs.0[2] - self.0[2] * rhs.0[1],
            self.0[2] * rhs.0[0] - self.0[0] * rhs.0[2],
            self.0[0] * rhs.0[1] - self.0[1] * rhs.0[0],
        ])
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        self.scale(T::one() / n)
    }

    pub fn is_finite(self) -> bool {
        self.0.iter().all(|c| c.is_finite())
    }

    /// Orthonormal frame (e1, e2, n) with n = self/|self|.
    ///
    /// Deterministic: the seed axis is the coordinate axis least aligned
    /// with the direction.
    pub fn orthonormal_frame(self) -> (Self, Self, Self) {
        let n = self.normalized();
        let a = n.0[0].abs();
        let b = n.0[1].abs();
        let c = n.0[2].abs();
        let seed = if a <= b && a <= c {
            Vec3::new(T::one(), T::zero(), T::zero())
        } else if b <= c {
            Vec3::new(T::zero(), T::one(), T::zero())
        } else {
            Vec3::new(T::zero(), T::zero(), T::one())
        };
        let e1 = n.cross(seed).normalized();
        let e2 = n.cross(e1);
        (e1, e2, n)
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Vec3([
            self.0[0] + rhs.0[0],
            self.0[1] + rhs.0[1],
            self.0[2] + rhs.0[2],
        ])
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Vec3([
            self.0[0] - rhs.0[0],
            self.0[1] - rhs.0[1],
            self.0[2] - rhs.0[2],
        ])
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Vec3([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, rhs: T) -> Self {
        self.scale(rhs)
    }
}

impl<T: Real> Div<T> for Vec3<T> {
    type Output = Self;
    fn div(self, rhs: T) -> Self {
        self.scale(T::one() / rhs)
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<T: Real> SubAssign for Vec3<T> {
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for Vec3<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_is_orthonormal() {
        let dirs: [Vec3<f64>; 4] = [
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 5.0),
            Vec3::new(-1.0, 2.0, 0.3),
            Vec3::new(1e-3, -1e-3, 1e-3),
        ];
        for u in dirs {
            let (e1, e2, n) = u.orthonormal_frame();
            assert!((e1.norm() - 1.0).abs() < 1e-14);
            assert!((e2.norm() - 1.0).abs() < 1e-14);
            assert!((n.norm() - 1.0).abs() < 1e-14);
            assert!(e1.dot(e2).abs() < 1e-14);
            assert!(e1.dot(n).abs() < 1e-14);
            assert!(e2.dot(n).abs() < 1e-14);
            assert!((n.dot(u.normalized()) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn cross_follows_right_hand_rule() {
        let x: Vec3<f64> = Vec3::new(1.0, 0.0, 0.0);
        let y = Vec3::new(0.0, 1.0, 0.0);
        assert_eq!(x.cross(y), Vec3::new(0.0, 0.0, 1.0));
    }
}
