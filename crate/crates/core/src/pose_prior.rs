//! Linear-Gaussian latent pose prior.
//!
//! The decoder maps a latent `v ~ N(0, I)` to `θ = θ_identity + D·v` with an
//! orthonormal `D`; the encoder is the orthogonal projection
//! `v = Dᵀ(θ − θ_identity)`. Both are linear, so their gradients are exact.

use serde::{Deserialize, Serialize};

use crate::ad::Real;
use crate::body_model::{identity_theta, THETA_DIM};
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentPose(pub Vec<f64>);

impl LatentPose {
    pub fn zero() -> Self {
        LatentPose(vec![0.0; LATENT_DIM])
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum()
    }
}

/// Decoder matrix `D`, stored row-major as `THETA_DIM` rows of `LATENT_DIM`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorBasis {
    pub decoder: Vec<Vec<f64>>,
}

impl PriorBasis {
    pub fn validate(&self) -> Result<()> {
        if self.decoder.len() != THETA_DIM {
            return Err(Error::shape("prior decoder rows", THETA_DIM, self.decoder.len()));
        }
        if let Some(r) = self.decoder.iter().find(|r| r.len() != LATENT_DIM) {
            return Err(Error::shape("prior decoder columns", LATENT_DIM, r.len()));
        }
        let err = self.orthonormality_error();
        if err > 1e-10 {
            return Err(Error::Config(format!(
                "prior basis columns are not orthonormal (max error {err:.3e})"
            )));
        }
        Ok(())
    }

    /// `max |DᵀD − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..LATENT_DIM {
            for b in a..LATENT_DIM {
                let dot: f64 = self.decoder.iter().map(|r| r[a] * r[b]).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    pub fn decode(&self, v: &LatentPose) -> Result<Vec<f64>> {
        if v.0.len() != LATENT_DIM {
            return Err(Error::shape("latent pose", LATENT_DIM, v.0.len()));
        }
        Ok(self.decode_slice(&v.0))
    }

    pub fn decode_slice(&self, v: &[f64]) -> Vec<f64> {
        let mut theta = identity_theta();
        for (t, row) in theta.iter_mut().zip(&self.decoder) {
            *t += row.iter().zip(v).map(|(d, x)| d * x).sum::<f64>();
        }
        theta
    }

    pub fn encode(&self, theta: &[f64]) -> Result<LatentPose> {
        if theta.len() != THETA_DIM {
            return Err(Error::shape("theta", THETA_DIM, theta.len()));
        }
        Ok(LatentPose(self.encode_generic(theta)))
    }

    /// `Dᵀ(θ − θ_identity)` on any scalar type.
    pub fn encode_generic<T: Real>(&self, theta: &[T]) -> Vec<T> {
        let id = identity_theta();
        let centered: Vec<T> = theta.iter().zip(&id).map(|(&t, &i)| t - i).collect();
        (0..LATENT_DIM)
            .map(|k| {
                let mut acc = T::zero();
                for (c, row) in centered.iter().zip(&self.decoder) {
                    acc += *c * row[k];
                }
                acc
            })
            .collect()
    }

    /// `Dᵀ·g`, mapping a θ-gradient to the latent space.
    pub fn pull_back(&self, grad_theta: &[f64]) -> Vec<f64> {
        (0..LATENT_DIM)
            .map(|k| grad_theta.iter().zip(&self.decoder).map(|(g, r)| g * r[k]).sum())
            .collect()
    }

    /// `‖ℰ(θ)‖²`, the latent prior penalty.
    pub fn penalty(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.encode(theta)?.norm_sq())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::ModelBundle;

    fn basis() -> &'static PriorBasis {
        &ModelBundle::builtin().prior
    }

    #[test]
    fn basis_is_orthonormal() {
        assert!(basis().orthonormality_error() < 1e-10);
        basis().validate().unwrap();
    }

    #[test]
    fn zero_latent_is_identity_pose() {
        assert_eq!(basis().decode(&LatentPose::zero()).unwrap(), identity_theta());
        assert_eq!(basis().encode(&identity_theta()).unwrap(), LatentPose::zero());
    }

    #[test]
    fn decode_is_linear_and_norm_preserving() {
        let b = basis();
        let a: Vec<f64> = (0..LATENT_DIM).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..LATENT_DIM).map(|i| (i as f64 * 0.11).cos()).collect();
        let sum: Vec<f64> = a.iter().zip(&c).map(|(x, y)| x + y).collect();
        let id = identity_theta();
        let off = |v: &[f64]| -> Vec<f64> { b.decode_slice(v).iter().zip(&id).map(|(t, i)| t - i).collect() };
        let (oa, oc, os) = (off(&a), off(&c), off(&sum));
        for k in 0..THETA_DIM {
            assert!((os[k] - oa[k] - oc[k]).abs() < 1e-12);
        }
        let na: f64 = oa.iter().map(|x| x * x).sum::<f64>().sqrt();
        let la: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((na - la).abs() < 1e-10);
    }

    #[test]
    fn arity_errors() {
        assert!(basis().decode(&LatentPose(vec![0.0; 3])).is_err());
        assert!(basis().encode(&[0.0; 5]).is_err());
    }
}
