use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PiuError, Result};
use crate::idspace::IdentityDataset;
use crate::optim::{AdamConfig, AdamW};
use crate::rng::{gaussian_vec, rng_from_seed, PiuRng};

use super::denoiser::{DenoiserParams, DenoiserSpec};
use super::schedule::{forward_diffuse, Latent, NoiseSchedule};
use super::world::SynthWorld;

/// Conditioning signal of a training item.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Embedding(Vec<f64>),
    /// The learned null embedding used for the unconditional branch.
    Null,
}

impl Condition {
    pub fn resolve<'a>(&'a self, params: &'a DenoiserParams) -> &'a [f64] {
        match self {
            Condition::Embedding(c) => c,
            Condition::Null => params.null_condition(),
        }
    }
}

/// One noisy latent with the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedItem {
    pub zt: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub cond: Condition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of replacing the condition with the null embedding.
    pub uncond_prob: f64,
    pub seed: u64,
    pub adam: AdamConfig,
    pub denoiser: DenoiserSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            uncond_prob: 0.1,
            seed: 0,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            denoiser: DenoiserSpec::default(),
        }
    }
}

/// Mean over items of `||eps - eps_theta(z_t, t, c)||²` and its gradient.
pub fn eps_mse_loss_and_grad(
    params: &DenoiserParams,
    items: &[NoisedItem],
) -> Result<(f64, DenoiserParams)> {
    if items.is_empty() {
        return invalid("empty batch");
    }
    let n = items.len() as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for item in items {
        let c = item.cond.resolve(params);
        let (out, cache) = params.forward(&item.zt, item.t, c)?;
        let resid: Vec<f64> = out.iter().zip(&item.eps).map(|(o, e)| o - e).collect();
        loss += resid.iter().map(|r| r * r).sum::<f64>() / n;
        let g: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
        let g_cond = params.backward(&cache, &g, &mut grads);
        if item.cond == Condition::Null {
            DenoiserParams::accumulate_null_grad(&mut grads, &g_cond);
        }
    }
    Ok((loss, grads))
}

/// Mean ε-prediction loss without gradients.
pub fn eps_mse_loss(params: &DenoiserParams, items: &[NoisedItem]) -> Result<f64> {
    if items.is_empty() {
        return invalid("empty batch");
    }
    let mut loss = 0.0;
    for item in items {
        let out = params.predict(&item.zt, item.t, item.cond.resolve(params))?;
        loss += out
            .iter()
            .zip(&item.eps)
            .map(|(o, e)| (o - e) * (o - e))
            .sum::<f64>();
    }
    Ok(loss / items.len() as f64)
}

/// Encodes an observation of `c` with random style, then noises it at a uniform timestep.
pub fn noised_real_item(
    rng: &mut PiuRng,
    world: &SynthWorld,
    schedule: &NoiseSchedule,
    c: &[f64],
    cond: Condition,
) -> Result<(NoisedItem, Vec<f64>)> {
    let style: Vec<f64> = gaussian_vec(rng, world.style_dim())
        .into_iter()
        .map(|s| s * world.style_scale())
        .collect();
    let x = world.synth_observe(c, &style)?;
    let z0 = world.encode(&x)?;
    let t = rng.random_range(1..=schedule.steps());
    let eps = gaussian_vec(rng, z0.len());
    let zt = forward_diffuse(&Latent::clean(z0), t, &eps, schedule)?;
    Ok((
        NoisedItem {
            zt: zt.values,
            t,
            eps,
            cond,
        },
        x,
    ))
}

/// Draws one base-training batch from every sample of the dataset.
pub fn sample_base_batch(
    rng: &mut PiuRng,
    dataset: &IdentityDataset,
    world: &SynthWorld,
    schedule: &NoiseSchedule,
    batch_size: usize,
    uncond_prob: f64,
) -> Result<Vec<NoisedItem>> {
    let samples = dataset.samples();
    (0..batch_size)
        .map(|_| {
            let s = &samples[rng.random_range(0..samples.len())];
            let cond = if rng.random::<f64>() < uncond_prob {
                Condition::Null
            } else {
                Condition::Embedding(s.embedding.0.clone())
            };
            noised_real_item(rng, world, schedule, s.embedding.as_slice(), cond)
                .map(|(item, _)| item)
        })
        .collect()
}

/// Result of [`train_base`]: final weights and the per-step batch loss.
#[derive(Debug, Clone)]
pub struct TrainedBase {
    pub params: DenoiserParams,
    pub losses: Vec<f64>,
}

/// Fits the base denoiser with the standard ε-prediction objective.
pub fn train_base(
    dataset: &IdentityDataset,
    world: &SynthWorld,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainedBase> {
    if dataset.samples().is_empty() {
        return invalid("cannot train on an empty dataset");
    }
    if dataset.dim() != world.identity_dim() {
        return invalid("dataset and world identity dimensions differ");
    }
    if cfg.batch_size == 0 {
        return invalid("batch size must be positive");
    }
    let mut params = DenoiserParams::init(&cfg.denoiser, world.latent_dim(), world.identity_dim())?;
    let trainable = vec![true; params.mats().len()];
    let mut opt = AdamW::new(cfg.adam, &params);
    let mut rng = rng_from_seed(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_base_batch(
            &mut rng,
            dataset,
            world,
            schedule,
            cfg.batch_size,
            cfg.uncond_prob,
        )?;
        let (loss, grads) = eps_mse_loss_and_grad(&params, &batch)?;
        if !loss.is_finite() {
            return Err(PiuError::TrainingDiverged { step });
        }
        losses.push(loss);
        opt.step(&mut params, &grads, &trainable);
    }
    Ok(TrainedBase { params, losses })
}
