//! Anchor-guided identity unlearning: forget target, preservation loss,
//! surgical parameter masks and the fine-tuning loop.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    forward_diffuse, DenoiserParams, Latent, NoiseSchedule, MASKABLE_BLOCK_MATRICES,
};
use crate::error::{invalid, PiuError, Result};
use crate::idspace::{
    format_f64, mix_with_rng, select_anchor, AnchorQuery, IdentityDataset, Split,
};
use crate::metrics::{layer_separation, LayerScore, ProbeSpec, SeparationProbe};
use crate::optim::{AdamConfig, AdamW};
use crate::rng::{gaussian_vec, rng_from_seed, PiuRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub lambda_preserve: f64,
    /// Negative guidance scale of the forget target.
    pub eta: f64,
    pub tau: f64,
    pub anchor_tolerance: f64,
    pub steps: usize,
    pub lr: f64,
    pub batch_forget: usize,
    pub batch_retain: usize,
    pub dirichlet_alpha: f64,
    /// Forget embeddings mixed per forget condition (clamped to the forget-train size).
    pub mix_k: usize,
    /// Restrict updates to the `surgical_top_k` most identity-separating blocks.
    /// When false, every block's maskable matrices are trained.
    pub surgical: bool,
    pub surgical_top_k: usize,
    pub seed: u64,
    pub probe: ProbeSpec,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            lambda_preserve: 10.0,
            eta: 1.5,
            tau: 0.2,
            anchor_tolerance: 1e-2,
            steps: 300,
            lr: 1e-4,
            batch_forget: 32,
            batch_retain: 32,
            dirichlet_alpha: 1.0,
            mix_k: 3,
            surgical: true,
            surgical_top_k: 2,
            seed: 0,
            probe: ProbeSpec::default(),
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_forget == 0
            || self.batch_retain == 0
            || self.mix_k == 0
            || self.surgical_top_k == 0
        {
            return invalid("batch sizes, mix_k and surgical_top_k must be at least 1");
        }
        if !(self.lambda_preserve >= 0.0) || !(self.eta >= 0.0) {
            return invalid("lambda_preserve and eta must be non-negative");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return invalid("learning rate must be positive");
        }
        if !(self.dirichlet_alpha > 0.0) {
            return invalid("dirichlet_alpha must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// `eps_a - eta * (eps_f - eps_a)`, elementwise.
pub fn forget_target_from_predictions(
    eps_anchor: &[f64],
    eps_forget: &[f64],
    eta: f64,
) -> Vec<f64> {
    eps_anchor
        .iter()
        .zip(eps_forget)
        .map(|(a, f)| a - eta * (f - a))
        .collect()
}

/// Frozen-model forget target. With `eta == 0` this is exactly the anchor prediction.
pub fn forget_target(
    frozen: &DenoiserParams,
    zt: &Latent,
    t: usize,
    c_f: &[f64],
    c_a: &[f64],
    eta: f64,
) -> Result<Vec<f64>> {
    if t == 0 {
        return invalid("forget target needs t >= 1");
    }
    if c_f.len() != c_a.len() {
        return invalid("forget and anchor conditions differ in dimension");
    }
    let eps_a = frozen.predict(&zt.values, t, c_a)?;
    if eta == 0.0 {
        return Ok(eps_a);
    }
    let eps_f = frozen.predict(&zt.values, t, c_f)?;
    Ok(forget_target_from_predictions(&eps_a, &eps_f, eta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForgetItem {
    pub zt: Vec<f64>,
    pub t: usize,
    pub c_f: Vec<f64>,
    pub c_a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetainItem {
    pub zt: Vec<f64>,
    pub t: usize,
    pub c_r: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiuLosses {
    pub forget: f64,
    pub preserve: f64,
    pub total: f64,
}

impl PiuLosses {
    /// Batch means of per-item squared errors, combined as `forget + lambda * preserve`.
    pub fn from_item_errors(forget: &[f64], preserve: &[f64], lambda: f64) -> Result<Self> {
        if forget.is_empty() || preserve.is_empty() {
            return invalid("empty batch");
        }
        let forget = forget.iter().sum::<f64>() / forget.len() as f64;
        let preserve = preserve.iter().sum::<f64>() / preserve.len() as f64;
        Ok(Self {
            forget,
            preserve,
            total: forget + lambda * preserve,
        })
    }
}

fn sq_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn per_item_errors(
    trainable: &DenoiserParams,
    frozen: &DenoiserParams,
    forget_batch: &[ForgetItem],
    retain_batch: &[RetainItem],
    eta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut fe = Vec::with_capacity(forget_batch.len());
    for it in forget_batch {
        let target = forget_target(
            frozen,
            &Latent {
                values: it.zt.clone(),
                timestep: it.t,
            },
            it.t,
            &it.c_f,
            &it.c_a,
            eta,
        )?;
        fe.push(sq_err(&trainable.predict(&it.zt, it.t, &it.c_f)?, &target));
    }
    let mut pe = Vec::with_capacity(retain_batch.len());
    for it in retain_batch {
        let target = frozen.predict(&it.zt, it.t, &it.c_r)?;
        pe.push(sq_err(&trainable.predict(&it.zt, it.t, &it.c_r)?, &target));
    }
    Ok((fe, pe))
}

/// Forget, preservation and total loss on one batch. Targets come from `frozen` and carry no gradient.
pub fn piu_losses(
    trainable: &DenoiserParams,
    frozen: &DenoiserParams,
    forget_batch: &[ForgetItem],
    retain_batch: &[RetainItem],
    cfg: &UnlearnConfig,
) -> Result<PiuLosses> {
    let (fe, pe) = per_item_errors(trainable, frozen, forget_batch, retain_batch, cfg.eta)?;
    PiuLosses::from_item_errors(&fe, &pe, cfg.lambda_preserve)
}

/// [`piu_losses`] together with `d loss_total / d trainable`.
pub fn piu_loss_and_grad(
    trainable: &DenoiserParams,
    frozen: &DenoiserParams,
    forget_batch: &[ForgetItem],
    retain_batch: &[RetainItem],
    cfg: &UnlearnConfig,
) -> Result<(PiuLosses, DenoiserParams)> {
    if forget_batch.is_empty() || retain_batch.is_empty() {
        return invalid("empty batch");
    }
    let mut grads = trainable.zeros_like();
    let nf = forget_batch.len() as f64;
    let mut fe = Vec::with_capacity(forget_batch.len());
    for it in forget_batch {
        let target = forget_target(
            frozen,
            &Latent {
                values: it.zt.clone(),
                timestep: it.t,
            },
            it.t,
            &it.c_f,
            &it.c_a,
            cfg.eta,
        )?;
        let (out, cache) = trainable.forward(&it.zt, it.t, &it.c_f)?;
        fe.push(sq_err(&out, &target));
        let g: Vec<f64> = out
            .iter()
            .zip(&target)
            .map(|(o, e)| 2.0 * (o - e) / nf)
            .collect();
        trainable.backward(&cache, &g, &mut grads);
    }
    let nr = retain_batch.len() as f64;
    let w = cfg.lambda_preserve;
    let mut pe = Vec::with_capacity(retain_batch.len());
    for it in retain_batch {
        let target = frozen.predict(&it.zt, it.t, &it.c_r)?;
        let (out, cache) = trainable.forward(&it.zt, it.t, &it.c_r)?;
        pe.push(sq_err(&out, &target));
        let g: Vec<f64> = out
            .iter()
            .zip(&target)
            .map(|(o, e)| w * 2.0 * (o - e) / nr)
            .collect();
        trainable.backward(&cache, &g, &mut grads);
    }
    Ok((PiuLosses::from_item_errors(&fe, &pe, w)?, grads))
}

/// Set of `(block tag, matrix name)` pairs that may be updated.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SurgicalMask {
    entries: BTreeSet<(String, String)>,
}

impl SurgicalMask {
    /// Q/K/V and feed-forward matrices of the given blocks.
    pub fn for_blocks<S: AsRef<str>>(tags: &[S]) -> Self {
        let entries = tags
            .iter()
            .flat_map(|t| {
                MASKABLE_BLOCK_MATRICES
                    .iter()
                    .map(move |m| (t.as_ref().to_string(), m.to_string()))
            })
            .collect();
        Self { entries }
    }

    /// Every conditioning block.
    pub fn all_blocks(params: &DenoiserParams) -> Self {
        Self::for_blocks(&params.block_tags())
    }

    pub fn entries(&self) -> &BTreeSet<(String, String)> {
        &self.entries
    }

    pub fn contains(&self, tag: &str, matrix: &str) -> bool {
        self.entries
            .contains(&(tag.to_string(), matrix.to_string()))
    }

    /// Selected block tags in block order.
    pub fn blocks(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.entries.iter().map(|(t, _)| t.clone()).collect();
        tags.dedup();
        tags.sort_by_key(|t| {
            t.trim_start_matches('L')
                .parse::<usize>()
                .unwrap_or(usize::MAX)
        });
        tags
    }

    /// Per-matrix trainable flags aligned with `params.mats()`.
    pub fn trainable_flags(&self, params: &DenoiserParams) -> Vec<bool> {
        params
            .names()
            .iter()
            .map(|n| {
                n.split_once('.')
                    .is_some_and(|(tag, local)| self.contains(tag, local))
            })
            .collect()
    }

    /// Trainable scalar count over total scalar count.
    pub fn trainable_fraction(&self, params: &DenoiserParams) -> f64 {
        let flags = self.trainable_flags(params);
        let trainable: usize = params
            .mats()
            .iter()
            .zip(&flags)
            .filter(|(_, &f)| f)
            .map(|(m, _)| m.len())
            .sum();
        trainable as f64 / params.param_count() as f64
    }
}

/// Mask over the `top_k` blocks with the largest `s_kv + s_q`; ties go to the earlier block.
pub fn surgical_mask_from_scores(
    params: &DenoiserParams,
    scores: &[LayerScore],
    top_k: usize,
) -> Result<SurgicalMask> {
    let tags = params.block_tags();
    if top_k == 0 || top_k > tags.len() {
        return invalid(format!("top_k must lie in [1, {}]", tags.len()));
    }
    let mut ranked = Vec::with_capacity(tags.len());
    for (b, tag) in tags.iter().enumerate() {
        let s = scores.iter().find(|s| &s.tag == tag).ok_or_else(|| {
            PiuError::InvalidArgument(format!("no separation score for block {tag}"))
        })?;
        ranked.push((b, s.combined()));
    }
    // stable sort keeps block order among equal scores
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let chosen: Vec<&String> = ranked[..top_k].iter().map(|&(b, _)| &tags[b]).collect();
    Ok(SurgicalMask::for_blocks(&chosen))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss_forget: f64,
    pub loss_preserve: f64,
    pub loss_total: f64,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} loss_forget={} loss_preserve={} loss_total={}",
            self.step,
            format_f64(self.loss_forget),
            format_f64(self.loss_preserve),
            format_f64(self.loss_total)
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    /// One line per step.
    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// Fixed ingredients of a run: anchor, condition pools and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlearnPlan {
    pub forget_identity: usize,
    pub anchor: usize,
    pub anchor_condition: Vec<f64>,
    pub forget_sources: Vec<Vec<f64>>,
    pub retain_pool: Vec<Vec<f64>>,
    pub mask: SurgicalMask,
    pub scores: Vec<LayerScore>,
}

impl UnlearnPlan {
    /// Selects the anchor, gathers forget/retain pools and scores blocks on the frozen model.
    pub fn prepare(
        frozen: &DenoiserParams,
        dataset: &IdentityDataset,
        forget_identity: usize,
        cfg: &UnlearnConfig,
        schedule: &NoiseSchedule,
    ) -> Result<Self> {
        cfg.validate()?;
        let query = AnchorQuery {
            tau: cfg.tau,
            tolerance: cfg.anchor_tolerance,
            forget_identity,
            rng_seed: cfg.seed,
        };
        let anchor = select_anchor(dataset, &query)?;
        let anchor_condition = dataset
            .centroid(anchor)
            .expect("anchor comes from the dataset")
            .to_vec();
        let forget_sources: Vec<Vec<f64>> = dataset
            .split_samples(Split::ForgetTrain)
            .filter(|s| s.identity == forget_identity)
            .map(|s| s.embedding.0.clone())
            .collect();
        if forget_sources.is_empty() {
            return invalid(format!(
                "identity {forget_identity} has no forget-train samples"
            ));
        }
        let retain_pool: Vec<Vec<f64>> = dataset
            .split_samples(Split::RetainTrain)
            .filter(|s| s.identity != forget_identity)
            .map(|s| s.embedding.0.clone())
            .collect();
        if retain_pool.is_empty() {
            return invalid("dataset has no retain-train samples");
        }
        let probe = SeparationProbe::from_dataset(
            dataset,
            schedule,
            frozen.dims().latent_dim,
            &ProbeSpec {
                seed: cfg.seed,
                ..cfg.probe
            },
        )?;
        let scores = layer_separation(frozen, &probe)?;
        let mask = if cfg.surgical {
            surgical_mask_from_scores(frozen, &scores, cfg.surgical_top_k)?
        } else {
            SurgicalMask::all_blocks(frozen)
        };
        Ok(Self {
            forget_identity,
            anchor,
            anchor_condition,
            forget_sources,
            retain_pool,
            mask,
            scores,
        })
    }

    /// One batch of Gaussian-latent forget items with mixed conditions, and retain items.
    pub fn draw_batch(
        &self,
        rng: &mut PiuRng,
        cfg: &UnlearnConfig,
        schedule: &NoiseSchedule,
        latent_dim: usize,
    ) -> Result<(Vec<ForgetItem>, Vec<RetainItem>)> {
        let k = cfg.mix_k.min(self.forget_sources.len());
        let noised = |rng: &mut PiuRng| -> Result<(Vec<f64>, usize)> {
            let z0 = gaussian_vec(rng, latent_dim);
            let t = rng.random_range(1..=schedule.steps());
            let eps = gaussian_vec(rng, latent_dim);
            Ok((
                forward_diffuse(&Latent::clean(z0), t, &eps, schedule)?.values,
                t,
            ))
        };
        let mut forget = Vec::with_capacity(cfg.batch_forget);
        for _ in 0..cfg.batch_forget {
            let (zt, t) = noised(rng)?;
            let c_f = mix_with_rng(rng, &self.forget_sources, k, cfg.dirichlet_alpha)?.values;
            forget.push(ForgetItem {
                zt,
                t,
                c_f,
                c_a: self.anchor_condition.clone(),
            });
        }
        let mut retain = Vec::with_capacity(cfg.batch_retain);
        for _ in 0..cfg.batch_retain {
            let (zt, t) = noised(rng)?;
            let c_r = self.retain_pool[rng.random_range(0..self.retain_pool.len())].clone();
            retain.push(RetainItem { zt, t, c_r });
        }
        Ok((forget, retain))
    }
}

/// Additional loss term evaluated on the current parameters each step; adds its
/// gradient into `grads` and returns its (weighted) value.
pub(crate) type ExtraTerm<'a> = dyn FnMut(&DenoiserParams, &mut DenoiserParams) -> Result<f64> + 'a;

/// Shared fine-tuning loop over [`UnlearnPlan::draw_batch`] batches.
pub(crate) fn train_with_plan(
    frozen: &DenoiserParams,
    plan: &UnlearnPlan,
    cfg: &UnlearnConfig,
    schedule: &NoiseSchedule,
    mut extra: Option<&mut ExtraTerm<'_>>,
) -> Result<(DenoiserParams, TrainingLog)> {
    let mut params = frozen.clone();
    let flags = plan.mask.trainable_flags(frozen);
    let mut opt = AdamW::new(cfg.adam(), &params);
    let mut rng = rng_from_seed(cfg.seed);
    let latent_dim = frozen.dims().latent_dim;
    let mut log = TrainingLog::default();
    for step in 1..=cfg.steps {
        let (fb, rb) = plan.draw_batch(&mut rng, cfg, schedule, latent_dim)?;
        let (losses, mut grads) = piu_loss_and_grad(&params, frozen, &fb, &rb, cfg)?;
        let mut total = losses.total;
        if let Some(term) = extra.as_mut() {
            total += term(&params, &mut grads)?;
        }
        if !total.is_finite() {
            return Err(PiuError::TrainingDiverged { step });
        }
        log.records.push(LogRecord {
            step,
            loss_forget: losses.forget,
            loss_preserve: losses.preserve,
            loss_total: total,
        });
        opt.step(&mut params, &grads, &flags);
    }
    Ok((params, log))
}

/// Output of an unlearning run.
#[derive(Debug, Clone)]
pub struct UnlearnRun {
    pub params: DenoiserParams,
    pub log: TrainingLog,
    pub plan: UnlearnPlan,
}

/// Fine-tunes a copy of `frozen` so the forget identity follows the anchor while
/// retain identities keep their frozen predictions.
pub fn run_unlearning(
    frozen: &DenoiserParams,
    dataset: &IdentityDataset,
    forget_identity: usize,
    cfg: &UnlearnConfig,
    schedule: &NoiseSchedule,
) -> Result<UnlearnRun> {
    let plan = UnlearnPlan::prepare(frozen, dataset, forget_identity, cfg, schedule)?;
    let (params, log) = train_with_plan(frozen, &plan, cfg, schedule, None)?;
    Ok(UnlearnRun { params, log, plan })
}
