use serde::{Deserialize, Serialize};

use crate::error::{invalid, PiuError, Result};

/// Linear-beta DDPM noise schedule.
///
/// Timesteps are 1-based: `beta[t-1]` and `alpha_bar[t-1]` belong to step `t`,
/// and step 0 is the clean latent with a virtual `alpha_bar = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 100,
            beta_min: 1e-3,
            beta_max: 0.1,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return invalid("schedule needs at least one timestep");
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return invalid(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        ));
    }
    let beta: Vec<f64> = if steps == 1 {
        vec![beta_min]
    } else {
        (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect()
    };
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Signal coefficient `sqrt(alpha_bar_t)`.
    pub fn gamma(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    /// Noise coefficient `sqrt(1 - alpha_bar_t)`.
    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    fn check(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps() || (!allow_zero && t == 0) {
            return invalid(format!(
                "timestep {t} outside [{}, {}]",
                u8::from(!allow_zero),
                self.steps()
            ));
        }
        Ok(())
    }
}

/// A latent vector tagged with the timestep it lives at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub values: Vec<f64>,
    pub timestep: usize,
}

impl Latent {
    pub fn clean(values: Vec<f64>) -> Self {
        Self {
            values,
            timestep: 0,
        }
    }
}

/// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
pub fn forward_diffuse(
    z0: &Latent,
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    schedule.check(t, true)?;
    if eps.len() != z0.values.len() {
        return invalid("noise and latent dimensions differ");
    }
    let (g, s) = (schedule.gamma(t), schedule.sigma(t));
    let values = if t == 0 {
        z0.values.clone()
    } else {
        z0.values
            .iter()
            .zip(eps)
            .map(|(z, e)| g * z + s * e)
            .collect()
    };
    Ok(Latent {
        values,
        timestep: t,
    })
}

/// `x0_hat = (z_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)`.
pub fn predict_x0(
    zt: &Latent,
    t: usize,
    eps_hat: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Latent> {
    schedule.check(t, false)?;
    if eps_hat.len() != zt.values.len() {
        return invalid("noise prediction and latent dimensions differ");
    }
    let ab = schedule.alpha_bar(t);
    if ab == 0.0 {
        return Err(PiuError::DegenerateSchedule(t));
    }
    let (g, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = zt
        .values
        .iter()
        .zip(eps_hat)
        .map(|(z, e)| (z - s * e) / g)
        .collect();
    Ok(Latent {
        values,
        timestep: 0,
    })
}
