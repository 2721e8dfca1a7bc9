//! Continuous 6D rotation representation: the first two columns of a
//! rotation matrix, decoded by normalize / orthogonalize / cross product.

use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::error::{Error, Result};
use crate::geom::{rot::Mat3, M3, V3};

/// Degeneracy threshold for column norms and parallel columns.
pub const DEGENERACY_EPS: f64 = 1e-12;

/// Orthonormality tolerance accepted by [`Rotation6D::encode`].
pub const ENCODE_TOL: f64 = 1e-6;

/// Two stacked 3-vectors `[c0; c1]`, the (unnormalized) first two columns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    pub const ZERO: Rotation6D = Rotation6D([0.0; 6]);

    pub fn decode(&self) -> Result<Mat3> {
        decode(&self.0).map(|m: M3<f64>| m.values())
    }

    /// Reads off the first two columns of `r` after checking orthonormality.
    pub fn encode(r: &Mat3) -> Result<Rotation6D> {
        let residual = orthonormality_residual(r);
        let det = det3(r);
        if residual > ENCODE_TOL || (det - 1.0).abs() > ENCODE_TOL {
            return Err(Error::NotARotation {
                residual: residual.max((det - 1.0).abs()),
            });
        }
        Ok(Rotation6D([
            r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1],
        ]))
    }
}

impl Default for Rotation6D {
    fn default() -> Self {
        Rotation6D::IDENTITY
    }
}

/// `max |RᵀR − I|` over all entries.
pub fn orthonormality_residual(r: &Mat3) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

pub fn det3(r: &Mat3) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

/// Decodes a 6D slice into a rotation matrix.
///
/// The all-zero vector decodes to the identity; it is the "unset" value used
/// wherever a root rotation is deliberately left out of a comparison.
pub fn decode<T: Real>(r: &[T]) -> Result<M3<T>> {
    debug_assert_eq!(r.len(), 6);
    if r.iter().all(|v| v.value() == 0.0) {
        return Ok(M3::identity());
    }
    let a1 = V3([r[0], r[1], r[2]]);
    let a2 = V3([r[3], r[4], r[5]]);
    let n1 = a1.norm();
    let n2v = a2.norm().value();
    if n1.value() < DEGENERACY_EPS || n2v < DEGENERACY_EPS {
        return Err(Error::DegenerateRotation(format!(
            "column norm below {DEGENERACY_EPS:e}"
        )));
    }
    let b1 = a1.scale(T::one() / n1);
    let u2 = a2.sub(&b1.scale(b1.dot(&a2)));
    let nu = u2.norm();
    if nu.value() < DEGENERACY_EPS * n2v.max(1.0) {
        return Err(Error::DegenerateRotation("columns are parallel".into()));
    }
    let b2 = u2.scale(T::one() / nu);
    let b3 = b1.cross(&b2);
    Ok(M3::from_cols(b1, b2, b3))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rot;

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (0..3).all(|i| (0..3).all(|j| (a[i][j] - b[i][j]).abs() <= tol))
    }

    #[test]
    fn identity_and_scaled_identity() {
        let id = rot::identity();
        assert_eq!(Rotation6D::IDENTITY.decode().unwrap(), id);
        let scaled = Rotation6D([2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).decode().unwrap();
        assert!(close(&scaled, &id, 0.0));
    }

    #[test]
    fn cyclic_permutation() {
        // columns ŷ, ẑ → x̂ ↦ ŷ, ŷ ↦ ẑ, ẑ ↦ x̂
        let r = Rotation6D([0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).decode().unwrap();
        let expected = [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(close(&r, &expected, 0.0));
        assert!((det3(&r) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_is_identity() {
        assert_eq!(Rotation6D::ZERO.decode().unwrap(), rot::identity());
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            Rotation6D([0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).decode(),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(matches!(
            Rotation6D([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).decode(),
            Err(Error::DegenerateRotation(_))
        ));
        assert!(matches!(
            Rotation6D([1.0, 2.0, 3.0, 2.0, 4.0, 6.0]).decode(),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn encode_examples() {
        assert_eq!(
            Rotation6D::encode(&rot::identity()).unwrap(),
            Rotation6D::IDENTITY
        );
        let rz = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(
            Rotation6D::encode(&rz).unwrap().0,
            [0.0, 1.0, 0.0, -1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn encode_rejects_non_rotations() {
        let scaled = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            Rotation6D::encode(&scaled),
            Err(Error::NotARotation { .. })
        ));
        let reflection = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Rotation6D::encode(&reflection).is_err());
    }
}
