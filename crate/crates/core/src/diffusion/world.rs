//! Linear observation model standing in for the image decoder and the face
//! recognizer.
//!
//! An observation is `x = A c + B s` where the columns of `A` span identity
//! directions and the columns of `B` span identity-free style directions.
//! Latents are coordinates in the `[A | B]` basis, so `encode` and `decode`
//! are exact inverses on the observation subspace.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PiuError, Result};
use crate::idspace::IdentityEmbedding;
use crate::linalg::{norm, Mat};
use crate::rng::{gaussian_vec, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub identity_dim: usize,
    pub style_dim: usize,
    pub observation_dim: usize,
    /// Standard deviation of style coordinates in training observations.
    pub style_scale: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            identity_dim: 32,
            style_dim: 4,
            observation_dim: 64,
            style_scale: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    a: Mat,
    b: Mat,
    style_scale: f64,
}

impl SynthWorld {
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        let (d, ds, obs) = (spec.identity_dim, spec.style_dim, spec.observation_dim);
        if d < 1 || d + ds > obs {
            return invalid(format!("need 1 <= identity_dim and identity_dim + style_dim <= observation_dim, got {d}+{ds} > {obs}"));
        }
        let mut rng = rng_from_seed(spec.seed);
        let raw = DMatrix::from_row_slice(obs, d + ds, &gaussian_vec(&mut rng, obs * (d + ds)));
        let q = raw.qr().q();
        let a = Mat::from_fn(obs, d, |r, c| q[(r, c)]);
        let b = Mat::from_fn(obs, ds, |r, c| q[(r, d + c)]);
        Self::from_bases(a, b, spec.style_scale)
    }

    /// Wraps explicit bases, checking `AᵀA = I`, `BᵀB = I` and `AᵀB = 0`.
    pub fn from_bases(a: Mat, b: Mat, style_scale: f64) -> Result<Self> {
        if a.rows != b.rows {
            return invalid("identity and style bases must share the observation dimension");
        }
        let check = |g: &Mat, eye: bool| {
            g.data.iter().enumerate().all(|(i, &v)| {
                let diag = eye && i / g.cols == i % g.cols;
                (v - if diag { 1.0 } else { 0.0 }).abs() < 1e-10
            })
        };
        if !check(&a.t_matmul(&a), true)
            || !check(&b.t_matmul(&b), true)
            || !check(&a.t_matmul(&b), false)
        {
            return invalid("bases are not orthonormal and mutually orthogonal");
        }
        Ok(Self { a, b, style_scale })
    }

    pub fn identity_dim(&self) -> usize {
        self.a.cols
    }

    pub fn style_dim(&self) -> usize {
        self.b.cols
    }

    pub fn observation_dim(&self) -> usize {
        self.a.rows
    }

    /// Latent dimension: identity plus style coordinates.
    pub fn latent_dim(&self) -> usize {
        self.a.cols + self.b.cols
    }

    pub fn style_scale(&self) -> f64 {
        self.style_scale
    }

    pub fn identity_basis(&self) -> &Mat {
        &self.a
    }

    pub fn style_basis(&self) -> &Mat {
        &self.b
    }

    /// `x = A c + B style`.
    pub fn synth_observe(&self, c: &[f64], style: &[f64]) -> Result<Vec<f64>> {
        if c.len() != self.identity_dim() || style.len() != self.style_dim() {
            return invalid("identity or style vector has the wrong dimension");
        }
        let mut x = self.a.mul_vec(c);
        if !style.is_empty() {
            for (xi, bi) in x.iter_mut().zip(self.b.mul_vec(style)) {
                *xi += bi;
            }
        }
        Ok(x)
    }

    /// `normalize(Aᵀ x)`.
    pub fn recognize(&self, x: &[f64]) -> Result<IdentityEmbedding> {
        if x.len() != self.observation_dim() {
            return invalid("observation has the wrong dimension");
        }
        let proj = self.a.vec_mul(x);
        let n = norm(&proj);
        if n == 0.0 || !n.is_finite() {
            return Err(PiuError::Unrecognizable);
        }
        Ok(IdentityEmbedding(proj.iter().map(|v| v / n).collect()))
    }

    /// Latent coordinates `[Aᵀ x; Bᵀ x]`.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.observation_dim() {
            return invalid("observation has the wrong dimension");
        }
        let mut z = self.a.vec_mul(x);
        z.extend(self.b.vec_mul(x));
        Ok(z)
    }

    /// `x = A z_id + B z_style`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return invalid("latent has the wrong dimension");
        }
        let (id, style) = z.split_at(self.identity_dim());
        self.synth_observe(id, style)
    }

    /// Identity-space pre-normalization projection of a decoded latent, `Aᵀ decode(z)`.
    pub fn identity_projection(&self, z: &[f64]) -> Result<Vec<f64>> {
        let x = self.decode(z)?;
        Ok(self.a.vec_mul(&x))
    }

    /// Back-propagates a gradient on `Aᵀ decode(z)` to a gradient on `z`.
    pub fn identity_projection_vjp(&self, grad_proj: &[f64]) -> Vec<f64> {
        // decode is [A | B] z, so the chain is [A | B]ᵀ A g
        let x = self.a.mul_vec(grad_proj);
        let mut g = self.a.vec_mul(&x);
        g.extend(self.b.vec_mul(&x));
        g
    }
}
