//! AdamW with decoupled weight decay, restricted to a trainable subset of matrices.

use serde::{Deserialize, Serialize};

use crate::diffusion::DenoiserParams;
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamConfig,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, params: &DenoiserParams) -> Self {
        let zeros: Vec<Mat> = params
            .mats()
            .iter()
            .map(|m| Mat::zeros(m.rows, m.cols))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. Matrices with `trainable[i] == false` are left untouched.
    pub fn step(
        &mut self,
        params: &mut DenoiserParams,
        grads: &DenoiserParams,
        trainable: &[bool],
    ) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step);
        let bc2 = 1.0 - beta2.powi(self.step);
        for (i, (p, g)) in params.mats_mut().iter_mut().zip(grads.mats()).enumerate() {
            if !trainable[i] {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
                v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m.data[k] / bc1;
                let v_hat = v.data[k] / bc2;
                p.data[k] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p.data[k]);
            }
        }
    }
}
