use crate::error::{invalid, Result};
use crate::linalg::Mat;
use crate::rng::{gaussian_vec, rng_from_seed, PiuRng};

use super::denoiser::DenoiserParams;
use super::schedule::{Latent, NoiseSchedule};

/// Ancestral DDPM chain from a given `z_T` down to `z_0`.
///
/// `predictor(z_t, t)` returns the noise estimate; the posterior variance is `beta_t`.
pub fn ancestral_from(
    schedule: &NoiseSchedule,
    z_top: Vec<f64>,
    rng: &mut PiuRng,
    mut predictor: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
) -> Result<Latent> {
    let mut z = z_top;
    for t in (1..=schedule.steps()).rev() {
        let eps_hat = predictor(&z, t)?;
        let beta = schedule.beta(t);
        let coef = beta / schedule.sigma(t);
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let noise = if t > 1 {
            gaussian_vec(rng, z.len())
        } else {
            Vec::new()
        };
        for (k, zk) in z.iter_mut().enumerate() {
            let mean = inv_sqrt_alpha * (*zk - coef * eps_hat[k]);
            *zk = if t > 1 {
                mean + beta.sqrt() * noise[k]
            } else {
                mean
            };
        }
    }
    Ok(Latent {
        values: z,
        timestep: 0,
    })
}

/// Noise estimate with classifier-free guidance against the learned null condition.
///
/// `guidance_scale == 1` evaluates the conditional branch only.
pub fn guided_prediction(
    params: &DenoiserParams,
    z: &[f64],
    t: usize,
    c: &[f64],
    guidance_scale: f64,
) -> Result<Vec<f64>> {
    let cond = params.predict(z, t, c)?;
    if guidance_scale == 1.0 {
        return Ok(cond);
    }
    let uncond = params.predict(z, t, params.null_condition())?;
    Ok(uncond
        .iter()
        .zip(&cond)
        .map(|(u, c)| u + guidance_scale * (c - u))
        .collect())
}

/// Draws one latent for condition `c`, deterministically per seed.
pub fn sample(
    params: &DenoiserParams,
    c: &[f64],
    schedule: &NoiseSchedule,
    guidance_scale: f64,
    seed: u64,
) -> Result<Latent> {
    if !(guidance_scale >= 0.0) {
        return invalid("guidance scale must be non-negative");
    }
    let mut rng = rng_from_seed(seed);
    let z_top = gaussian_vec(&mut rng, params.dims().latent_dim);
    ancestral_from(schedule, z_top, &mut rng, |z, t| {
        guided_prediction(params, z, t, c, guidance_scale)
    })
}

/// Samples many conditions at once; row `i` of the result is the latent for `conds[i]` with `seeds[i]`.
pub fn sample_many(
    params: &DenoiserParams,
    conds: &[Vec<f64>],
    schedule: &NoiseSchedule,
    guidance_scale: f64,
    seeds: &[u64],
) -> Result<Mat> {
    let m = params.dims().latent_dim;
    let mut out = Mat::zeros(conds.len(), m);
    for (i, (c, &s)) in conds.iter().zip(seeds).enumerate() {
        let z = sample(params, c, schedule, guidance_scale, s)?;
        out.data[i * m..(i + 1) * m].copy_from_slice(&z.values);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserSpec;
    use crate::diffusion::schedule::{forward_diffuse, make_schedule};

    fn params() -> DenoiserParams {
        DenoiserParams::init(
            &DenoiserSpec {
                tokens: 2,
                width: 4,
                blocks: 2,
                ff_hidden: 4,
                init_seed: 3,
            },
            4,
            3,
        )
        .unwrap()
    }

    #[test]
    fn unit_guidance_equals_conditional_sampling() {
        let p = params();
        let s = make_schedule(20, 1e-3, 0.05).unwrap();
        let c = [0.5, -0.5, 0.7];
        let guided = sample(&p, &c, &s, 1.0, 17).unwrap();
        let mut rng = rng_from_seed(17);
        let z_top = gaussian_vec(&mut rng, 4);
        let plain = ancestral_from(&s, z_top, &mut rng, |z, t| p.predict(z, t, &c)).unwrap();
        assert_eq!(guided, plain);
        assert_ne!(sample(&p, &c, &s, 3.0, 17).unwrap(), guided);
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = params();
        let s = make_schedule(10, 1e-3, 0.05).unwrap();
        let c = [0.1, 0.2, 0.3];
        assert_eq!(
            sample(&p, &c, &s, 2.0, 5).unwrap(),
            sample(&p, &c, &s, 2.0, 5).unwrap()
        );
        assert!(sample(&p, &c, &s, -1.0, 5).is_err());
    }

    #[test]
    fn one_step_chain_with_true_noise_recovers_the_clean_latent() {
        let s = make_schedule(1, 0.2, 0.2).unwrap();
        let z0 = Latent::clean(vec![0.4, -1.1, 2.0]);
        let eps = vec![0.3, 0.9, -1.4];
        let z1 = forward_diffuse(&z0, 1, &eps, &s).unwrap();
        let mut rng = rng_from_seed(0);
        let out = ancestral_from(&s, z1.values, &mut rng, |_, _| Ok(eps.clone())).unwrap();
        for (a, b) in out.values.iter().zip(&z0.values) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
