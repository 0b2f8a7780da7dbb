//! Fixtures shared by the benchmarks, sized like the reference experiment.

use piu_core::baselines::UceEditRequest;
use piu_core::diffusion::{
    forward_diffuse, make_schedule, DenoiserParams, DenoiserSpec, Latent, NoiseSchedule,
};
use piu_core::linalg::Mat;
use piu_core::rng::{gaussian_vec, rng_from_seed, PiuRng};
use piu_core::unlearn::{ForgetItem, RetainItem};
use rand::Rng;

pub const LATENT_DIM: usize = 36;
pub const COND_DIM: usize = 32;

pub fn reference_denoiser() -> DenoiserParams {
    DenoiserParams::init(&DenoiserSpec::default(), LATENT_DIM, COND_DIM).expect("valid spec")
}

pub fn reference_schedule() -> NoiseSchedule {
    make_schedule(100, 1e-3, 0.1).expect("valid schedule")
}

pub fn noisy_latent(rng: &mut PiuRng, schedule: &NoiseSchedule) -> (Vec<f64>, usize) {
    let t = rng.random_range(1..=schedule.steps());
    let z0 = Latent::clean(gaussian_vec(rng, LATENT_DIM));
    let eps = gaussian_vec(rng, LATENT_DIM);
    (
        forward_diffuse(&z0, t, &eps, schedule)
            .expect("valid timestep")
            .values,
        t,
    )
}

/// Forget and retain batches of `n` items each.
pub fn batches(
    n: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> (Vec<ForgetItem>, Vec<RetainItem>) {
    let mut rng = rng_from_seed(seed);
    let forget = (0..n)
        .map(|_| {
            let (zt, t) = noisy_latent(&mut rng, schedule);
            ForgetItem {
                zt,
                t,
                c_f: gaussian_vec(&mut rng, COND_DIM),
                c_a: gaussian_vec(&mut rng, COND_DIM),
            }
        })
        .collect();
    let retain = (0..n)
        .map(|_| {
            let (zt, t) = noisy_latent(&mut rng, schedule);
            RetainItem {
                zt,
                t,
                c_r: gaussian_vec(&mut rng, COND_DIM),
            }
        })
        .collect();
    (forget, retain)
}

/// A key-projection edit with `edits` sources and `preserve` retained directions.
pub fn uce_request(
    out: usize,
    inp: usize,
    edits: usize,
    preserve: usize,
    seed: u64,
) -> UceEditRequest {
    let mut rng = rng_from_seed(seed);
    UceEditRequest {
        w_old: Mat::from_vec(out, inp, gaussian_vec(&mut rng, out * inp)),
        edit_pairs: (0..edits)
            .map(|_| (gaussian_vec(&mut rng, inp), gaussian_vec(&mut rng, out)))
            .collect(),
        preserve: (0..preserve).map(|_| gaussian_vec(&mut rng, inp)).collect(),
        alpha_e: 20.0,
        alpha_p: 1.0,
        lambda_reg: 0.7,
    }
}

pub fn point_cloud(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    (0..n).map(|_| gaussian_vec(&mut rng, dim)).collect()
}
