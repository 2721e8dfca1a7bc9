//! Minimal 3-vector and 3x3 matrix types over any [`Real`].
//!
//! nalgebra is used for plain `f64` linear algebra elsewhere; these exist so
//! the differentiable paths can run on recorded scalars.

use crate::ad::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct V3<T>(pub [T; 3]);

impl<T: Real> V3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        V3([x, y, z])
    }
    pub fn zero() -> Self {
        V3([T::zero(); 3])
    }
    pub fn from_f64(v: [f64; 3]) -> Self {
        V3([T::cst(v[0]), T::cst(v[1]), T::cst(v[2])])
    }
    pub fn from_slice(s: &[T]) -> Self {
        V3([s[0], s[1], s[2]])
    }
    #[inline]
    pub fn x(&self) -> T {
        self.0[0]
    }
    #[inline]
    pub fn y(&self) -> T {
        self.0[1]
    }
    #[inline]
    pub fn z(&self) -> T {
        self.0[2]
    }
    pub fn add(&self, o: &Self) -> Self {
        V3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
    pub fn sub(&self, o: &Self) -> Self {
        V3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
    pub fn scale(&self, s: T) -> Self {
        V3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
    pub fn scale_f(&self, s: f64) -> Self {
        V3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }
    pub fn dot(&self, o: &Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }
    pub fn cross(&self, o: &Self) -> Self {
        let [a0, a1, a2] = self.0;
        let [b0, b1, b2] = o.0;
        V3([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0])
    }
    pub fn norm_sq(&self) -> T {
        self.dot(self)
    }
    pub fn norm(&self) -> T {
        self.norm_sq().sqrt()
    }
    pub fn values(&self) -> [f64; 3] {
        [self.0[0].value(), self.0[1].value(), self.0[2].value()]
    }
}

/// Column-major 3x3 matrix: `cols[j]` is column j.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct M3<T> {
    pub cols: [V3<T>; 3],
}

impl<T: Real> M3<T> {
    pub fn identity() -> Self {
        let z = T::zero();
        let o = T::one();
        M3 {
            cols: [V3([o, z, z]), V3([z, o, z]), V3([z, z, o])],
        }
    }
    pub fn from_cols(c0: V3<T>, c1: V3<T>, c2: V3<T>) -> Self {
        M3 { cols: [c0, c1, c2] }
    }
    /// Row-major f64 array to matrix.
    pub fn from_rows_f64(r: &[[f64; 3]; 3]) -> Self {
        M3 {
            cols: [
                V3::from_f64([r[0][0], r[1][0], r[2][0]]),
                V3::from_f64([r[0][1], r[1][1], r[2][1]]),
                V3::from_f64([r[0][2], r[1][2], r[2][2]]),
            ],
        }
    }
    #[inline]
    pub fn at(&self, row: usize, col: usize) -> T {
        self.cols[col].0[row]
    }
    pub fn mul_vec(&self, v: &V3<T>) -> V3<T> {
        self.cols[0]
            .scale(v.0[0])
            .add(&self.cols[1].scale(v.0[1]))
            .add(&self.cols[2].scale(v.0[2]))
    }
    pub fn mul_mat(&self, o: &Self) -> Self {
        M3 {
            cols: [
                self.mul_vec(&o.cols[0]),
                self.mul_vec(&o.cols[1]),
                self.mul_vec(&o.cols[2]),
            ],
        }
    }
    pub fn transpose(&self) -> Self {
        let m = |r, c| self.at(r, c);
        M3 {
            cols: [
                V3([m(0, 0), m(0, 1), m(0, 2)]),
                V3([m(1, 0), m(1, 1), m(1, 2)]),
                V3([m(2, 0), m(2, 1), m(2, 2)]),
            ],
        }
    }
    /// Row-major values.
    pub fn values(&self) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.at(r, c).value();
            }
        }
        out
    }
}

/// Row-major rotation helpers on plain f64.
pub mod rot {
    pub type Mat3 = [[f64; 3]; 3];

    pub fn mul(a: &Mat3, b: &Mat3) -> Mat3 {
        let mut o = [[0.0; 3]; 3];
        for (i, row) in o.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        o
    }

    pub fn transpose(a: &Mat3) -> Mat3 {
        let mut o = [[0.0; 3]; 3];
        for (i, row) in o.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[j][i];
            }
        }
        o
    }

    pub fn apply(a: &Mat3, v: &[f64; 3]) -> [f64; 3] {
        [
            a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
            a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
            a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
        ]
    }

    pub fn axis_angle(axis: [f64; 3], angle: f64) -> Mat3 {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    pub fn identity() -> Mat3 {
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
    }

    /// Rotation angle of `a`, in radians.
    pub fn angle(a: &Mat3) -> f64 {
        let tr = a[0][0] + a[1][1] + a[2][2];
        ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }

    pub fn add(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    pub fn norm(a: &[f64; 3]) -> f64 {
        (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
    }
}
