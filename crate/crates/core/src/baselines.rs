//! Reference unlearning methods: norm-controlled gradient subtraction (SISS without
//! importance sampling), closed-form key/value editing (UCE) and anchor matching
//! with an identity-consistency term (WID).

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    eps_mse_loss, eps_mse_loss_and_grad, noised_real_item, predict_x0, Condition, DenoiserParams,
    Latent, NoiseSchedule, NoisedItem, SynthWorld,
};
use crate::error::{invalid, PiuError, Result};
use crate::idspace::{cosine_sim, IdentityDataset, Split};
use crate::linalg::{dot, norm, normalized, Mat};
use crate::optim::{AdamConfig, AdamW};
use crate::rng::{rng_from_seed, substream, PiuRng};
use crate::unlearn::{
    forget_target, train_with_plan, ForgetItem, LogRecord, TrainingLog, UnlearnConfig, UnlearnPlan,
    UnlearnRun,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SissConfig {
    /// Forgetting strength relative to the retain gradient norm.
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_forget: usize,
    pub batch_retain: usize,
    /// Noise encoded observations (true) or pure Gaussian latents (false).
    pub real_latents: bool,
    pub seed: u64,
}

impl Default for SissConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 5e-6,
            steps: 60,
            batch_forget: 32,
            batch_retain: 32,
            real_latents: true,
            seed: 0,
        }
    }
}

/// Mean ε-prediction MSE on the retain batch and on the forget batch.
pub fn siss_losses(
    trainable: &DenoiserParams,
    retain_batch: &[NoisedItem],
    forget_batch: &[NoisedItem],
) -> Result<(f64, f64)> {
    Ok((
        eps_mse_loss(trainable, retain_batch)?,
        eps_mse_loss(trainable, forget_batch)?,
    ))
}

/// `g_x - lambda_eff g_a` with `lambda_eff = beta ||g_x|| / ||g_a||`.
pub fn siss_update_direction(g_retain: &[f64], g_forget: &[f64], beta: f64) -> Result<Vec<f64>> {
    if g_retain.len() != g_forget.len() {
        return invalid("gradient vectors differ in length");
    }
    let na = norm(g_forget);
    if na == 0.0 || !na.is_finite() {
        return Err(PiuError::DegenerateGradient(
            "forget gradient has zero or non-finite norm".into(),
        ));
    }
    let lambda_eff = beta * norm(g_retain) / na;
    Ok(g_retain
        .iter()
        .zip(g_forget)
        .map(|(x, a)| x - lambda_eff * a)
        .collect())
}

fn unflatten(like: &DenoiserParams, flat: &[f64]) -> DenoiserParams {
    let mut out = like.zeros_like();
    let mut off = 0;
    for m in out.mats_mut() {
        let n = m.data.len();
        m.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    out
}

fn identity_embeddings(
    dataset: &IdentityDataset,
    split: Split,
    keep: impl Fn(usize) -> bool,
) -> Vec<Vec<f64>> {
    dataset
        .split_samples(split)
        .filter(|s| keep(s.identity))
        .map(|s| s.embedding.0.clone())
        .collect()
}

fn siss_batch(
    rng: &mut PiuRng,
    pool: &[Vec<f64>],
    n: usize,
    real: bool,
    world: &SynthWorld,
    schedule: &NoiseSchedule,
) -> Result<Vec<NoisedItem>> {
    (0..n)
        .map(|_| {
            let c = &pool[rng.random_range(0..pool.len())];
            if real {
                Ok(noised_real_item(rng, world, schedule, c, Condition::Embedding(c.clone()))?.0)
            } else {
                let z0 = crate::rng::gaussian_vec(rng, world.latent_dim());
                let t = rng.random_range(1..=schedule.steps());
                let eps = crate::rng::gaussian_vec(rng, z0.len());
                let zt = crate::diffusion::forward_diffuse(&Latent::clean(z0), t, &eps, schedule)?
                    .values;
                Ok(NoisedItem {
                    zt,
                    t,
                    eps,
                    cond: Condition::Embedding(c.clone()),
                })
            }
        })
        .collect()
}

/// Full-network fine-tuning with the norm-controlled subtraction rule. The log
/// records the forget MSE, the retain MSE and `L_retain - lambda_eff L_forget`.
pub fn run_siss(
    frozen: &DenoiserParams,
    dataset: &IdentityDataset,
    forget_identity: usize,
    cfg: &SissConfig,
    schedule: &NoiseSchedule,
    world: &SynthWorld,
) -> Result<(DenoiserParams, TrainingLog)> {
    if !(cfg.beta > 0.0) {
        return invalid("SISS beta must be positive");
    }
    if cfg.batch_forget == 0 || cfg.batch_retain == 0 {
        return invalid("SISS batch sizes must be at least 1");
    }
    let forget_pool = identity_embeddings(dataset, Split::ForgetTrain, |id| id == forget_identity);
    let retain_pool = identity_embeddings(dataset, Split::RetainTrain, |id| id != forget_identity);
    if forget_pool.is_empty() || retain_pool.is_empty() {
        return invalid("SISS needs forget-train and retain-train samples");
    }
    let mut params = frozen.clone();
    let flags = vec![true; params.mats().len()];
    let mut opt = AdamW::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut rng = rng_from_seed(cfg.seed);
    let mut log = TrainingLog::default();
    for step in 1..=cfg.steps {
        let retain = siss_batch(
            &mut rng,
            &retain_pool,
            cfg.batch_retain,
            cfg.real_latents,
            world,
            schedule,
        )?;
        let forget = siss_batch(
            &mut rng,
            &forget_pool,
            cfg.batch_forget,
            cfg.real_latents,
            world,
            schedule,
        )?;
        let (l_r, g_r) = eps_mse_loss_and_grad(&params, &retain)?;
        let (l_f, g_f) = eps_mse_loss_and_grad(&params, &forget)?;
        let (gx, ga) = (g_r.flatten(), g_f.flatten());
        let lambda_eff = cfg.beta * norm(&gx) / norm(&ga);
        let update = siss_update_direction(&gx, &ga, cfg.beta)?;
        let total = l_r - lambda_eff * l_f;
        if !total.is_finite() {
            return Err(PiuError::TrainingDiverged { step });
        }
        log.records.push(LogRecord {
            step,
            loss_forget: l_f,
            loss_preserve: l_r,
            loss_total: total,
        });
        let update = unflatten(&params, &update);
        opt.step(&mut params, &update, &flags);
    }
    Ok((params, log))
}

/// One closed-form edit of a projection `W_old` (output × input, applied as `W c`).
#[derive(Debug, Clone, PartialEq)]
pub struct UceEditRequest {
    pub w_old: Mat,
    /// `(c_i, v*_i)` pairs: source condition and its desired output.
    pub edit_pairs: Vec<(Vec<f64>, Vec<f64>)>,
    pub preserve: Vec<Vec<f64>>,
    pub alpha_e: f64,
    pub alpha_p: f64,
    pub lambda_reg: f64,
}

impl UceEditRequest {
    /// Weighted objective `α_e Σ‖W c_i − v*_i‖² + α_p Σ‖W c_j − W_old c_j‖² + λ‖W − W_old‖²_F`.
    pub fn objective(&self, w: &Mat) -> f64 {
        let mut total = 0.0;
        for (c, v) in &self.edit_pairs {
            total += self.alpha_e * crate::linalg::sq_dist(&w.mul_vec(c), v);
        }
        for c in &self.preserve {
            total += self.alpha_p * crate::linalg::sq_dist(&w.mul_vec(c), &self.w_old.mul_vec(c));
        }
        let diff: f64 = w
            .data
            .iter()
            .zip(&self.w_old.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        total + self.lambda_reg * diff
    }

    /// Gradient of [`objective`](Self::objective) with respect to `W`.
    pub fn objective_grad(&self, w: &Mat) -> Mat {
        let mut g = Mat::zeros(w.rows, w.cols);
        let mut add = |scale: f64, c: &[f64], r: &[f64]| {
            for i in 0..w.rows {
                for j in 0..w.cols {
                    g.data[i * w.cols + j] += 2.0 * scale * r[i] * c[j];
                }
            }
        };
        for (c, v) in &self.edit_pairs {
            let r: Vec<f64> = w.mul_vec(c).iter().zip(v).map(|(a, b)| a - b).collect();
            add(self.alpha_e, c, &r);
        }
        for c in &self.preserve {
            let r: Vec<f64> = w
                .mul_vec(c)
                .iter()
                .zip(self.w_old.mul_vec(c))
                .map(|(a, b)| a - b)
                .collect();
            add(self.alpha_p, c, &r);
        }
        for (gk, (a, b)) in g.data.iter_mut().zip(w.data.iter().zip(&self.w_old.data)) {
            *gk += 2.0 * self.lambda_reg * (a - b);
        }
        g
    }
}

/// `W = (α_e Σ v* cᵀ + α_p Σ W_old c cᵀ + λ W_old)(α_e Σ c cᵀ + α_p Σ c cᵀ + λ I)⁻¹`.
pub fn uce_edit(req: &UceEditRequest) -> Result<Mat> {
    let (out, inp) = (req.w_old.rows, req.w_old.cols);
    if !(req.alpha_e >= 0.0) || !(req.alpha_p >= 0.0) || !(req.lambda_reg >= 0.0) {
        return invalid("UCE weights must be non-negative");
    }
    if req
        .edit_pairs
        .iter()
        .any(|(c, v)| c.len() != inp || v.len() != out)
        || req.preserve.iter().any(|c| c.len() != inp)
    {
        return invalid("UCE request has inconsistent dimensions");
    }
    let w_old = DMatrix::from_row_slice(out, inp, &req.w_old.data);
    let mut lhs = DMatrix::<f64>::identity(inp, inp) * req.lambda_reg;
    let mut rhs = &w_old * req.lambda_reg;
    for (c, v) in &req.edit_pairs {
        let c = DMatrix::from_column_slice(inp, 1, c);
        let v = DMatrix::from_column_slice(out, 1, v);
        lhs += &c * c.transpose() * req.alpha_e;
        rhs += v * c.transpose() * req.alpha_e;
    }
    for c in &req.preserve {
        let c = DMatrix::from_column_slice(inp, 1, c);
        let cct = &c * c.transpose();
        rhs += &w_old * &cct * req.alpha_p;
        lhs += cct * req.alpha_p;
    }
    // W lhs = rhs with lhs symmetric, so lhs Wᵀ = rhsᵀ
    let lu = lhs.lu();
    let pivots = lu.u().diagonal().map(f64::abs);
    if pivots.min() <= 1e-12 * pivots.max() {
        return Err(PiuError::SingularSystem);
    }
    let wt = lu.solve(&rhs.transpose()).ok_or(PiuError::SingularSystem)?;
    if wt.iter().any(|v| !v.is_finite()) {
        return Err(PiuError::SingularSystem);
    }
    let w = wt.transpose();
    Ok(Mat::from_fn(out, inp, |r, c| w[(r, c)]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UceConfig {
    pub alpha_e: f64,
    pub alpha_p: f64,
    pub lambda_reg: f64,
    /// Edit only the blocks of the surgical mask instead of every block.
    pub surgical_only: bool,
    /// Number of retain identities (lowest labels first) whose normalized centroids are preserved.
    pub max_preserve: Option<usize>,
}

impl Default for UceConfig {
    fn default() -> Self {
        Self {
            alpha_e: 20.0,
            alpha_p: 1.0,
            lambda_reg: 0.7,
            surgical_only: false,
            max_preserve: None,
        }
    }
}

/// Edits `W_k` and `W_v` of the chosen blocks so that every forget-train embedding
/// maps to the anchor centroid's key/value, preserving normalized retain centroids.
pub fn run_uce(
    frozen: &DenoiserParams,
    dataset: &IdentityDataset,
    forget_identity: usize,
    anchor: usize,
    blocks: &[String],
    cfg: &UceConfig,
) -> Result<DenoiserParams> {
    let target = dataset
        .centroid(anchor)
        .ok_or_else(|| PiuError::InvalidArgument(format!("unknown anchor {anchor}")))?;
    let sources = identity_embeddings(dataset, Split::ForgetTrain, |id| id == forget_identity);
    if sources.is_empty() {
        return invalid(format!(
            "identity {forget_identity} has no forget-train samples"
        ));
    }
    let mut preserve: Vec<Vec<f64>> = dataset
        .centroids()
        .iter()
        .filter(|(&id, _)| id != forget_identity)
        .map(|(_, mu)| normalized(mu))
        .collect();
    if let Some(cap) = cfg.max_preserve {
        preserve.truncate(cap);
    }
    let mut params = frozen.clone();
    for tag in blocks {
        for local in ["k", "v"] {
            let idx = frozen
                .block_matrix_index(tag, local)
                .ok_or_else(|| PiuError::InvalidArgument(format!("unknown block {tag}")))?;
            let w_kv = &frozen.mats()[idx];
            // stored as cond_dim × width and applied as c W; the edit works on Wᵀ
            let w_old = Mat::from_fn(w_kv.cols, w_kv.rows, |r, c| w_kv.get(c, r));
            let v_star = w_old.mul_vec(target);
            let req = UceEditRequest {
                edit_pairs: sources
                    .iter()
                    .map(|c| (c.clone(), v_star.clone()))
                    .collect(),
                preserve: preserve.clone(),
                alpha_e: cfg.alpha_e,
                alpha_p: cfg.alpha_p,
                lambda_reg: cfg.lambda_reg,
                w_old,
            };
            let w = uce_edit(&req)?;
            params.mats_mut()[idx] = Mat::from_fn(w.cols, w.rows, |r, c| w.get(c, r));
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WidConfig {
    pub lambda_id: f64,
    pub lr: f64,
    pub steps: usize,
    /// Real anchor observations per step for the identity term.
    pub id_batch: usize,
}

impl Default for WidConfig {
    fn default() -> Self {
        Self {
            lambda_id: 0.1,
            lr: 5e-6,
            steps: 100,
            id_batch: 8,
        }
    }
}

impl WidConfig {
    /// The anchor-matching part: `base` with η and the preservation weight pinned to zero.
    pub fn unlearn_config(&self, base: &UnlearnConfig) -> UnlearnConfig {
        UnlearnConfig {
            eta: 0.0,
            lambda_preserve: 0.0,
            lr: self.lr,
            steps: self.steps,
            ..*base
        }
    }
}

/// `1 - cos(s_id, s_hat)`; equals `½‖u − v‖²` for unit vectors.
pub fn wid_identity_loss(s_id: &[f64], s_hat: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine_sim(s_id, s_hat)?)
}

/// A real observation noised at `t`, queried under the forget condition.
#[derive(Debug, Clone, PartialEq)]
pub struct WidItem {
    pub zt: Vec<f64>,
    pub t: usize,
    pub c_f: Vec<f64>,
    /// Recognition embedding of the clean observation.
    pub s_id: Vec<f64>,
}

/// `lambda_id · mean_i (1 − cos(s_id, recognize(decode(x̂₀))))` and its gradient,
/// where `x̂₀` is recovered from `ε_θ(z_t, t, c_f)`.
pub fn wid_identity_term(
    params: &DenoiserParams,
    items: &[WidItem],
    lambda_id: f64,
    world: &SynthWorld,
    schedule: &NoiseSchedule,
) -> Result<(f64, DenoiserParams)> {
    if items.is_empty() {
        return invalid("empty identity batch");
    }
    let n = items.len() as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    for it in items {
        let (eps_hat, cache) = params.forward(&it.zt, it.t, &it.c_f)?;
        let x0 = predict_x0(
            &Latent {
                values: it.zt.clone(),
                timestep: it.t,
            },
            it.t,
            &eps_hat,
            schedule,
        )?;
        let p = world.identity_projection(&x0.values)?;
        let pn = norm(&p);
        if pn == 0.0 || !pn.is_finite() {
            return Err(PiuError::Unrecognizable);
        }
        let s_hat: Vec<f64> = p.iter().map(|v| v / pn).collect();
        let s_id = normalized(&it.s_id);
        let cos = dot(&s_id, &s_hat);
        loss += lambda_id * (1.0 - cos) / n;
        // d(1 - cos)/dp = -(s - cos ŝ)/‖p‖
        let g_p: Vec<f64> = s_id
            .iter()
            .zip(&s_hat)
            .map(|(s, h)| -lambda_id / n * (s - cos * h) / pn)
            .collect();
        let g_x0 = world.identity_projection_vjp(&g_p);
        let k = -schedule.sigma(it.t) / schedule.gamma(it.t);
        let g_eps: Vec<f64> = g_x0.iter().map(|g| k * g).collect();
        params.backward(&cache, &g_eps, &mut grads);
    }
    Ok((loss, grads))
}

/// Anchor-matching forget loss (η = 0) plus the weighted identity term, with gradient.
pub fn wid_loss_and_grad(
    params: &DenoiserParams,
    frozen: &DenoiserParams,
    forget_batch: &[ForgetItem],
    id_items: &[WidItem],
    lambda_id: f64,
    world: &SynthWorld,
    schedule: &NoiseSchedule,
) -> Result<(f64, DenoiserParams)> {
    if forget_batch.is_empty() {
        return invalid("empty forget batch");
    }
    let nf = forget_batch.len() as f64;
    let (mut loss, mut grads) = wid_identity_term(params, id_items, lambda_id, world, schedule)?;
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
            0.0,
        )?;
        let (out, cache) = params.forward(&it.zt, it.t, &it.c_f)?;
        loss += out
            .iter()
            .zip(&target)
            .map(|(o, e)| (o - e) * (o - e))
            .sum::<f64>()
            / nf;
        let g: Vec<f64> = out
            .iter()
            .zip(&target)
            .map(|(o, e)| 2.0 * (o - e) / nf)
            .collect();
        params.backward(&cache, &g, &mut grads);
    }
    Ok((loss, grads))
}

const WID_ID_STREAM: u64 = 0x1D_0057;

/// Draws identity-term items: real anchor observations under random forget-train conditions.
pub fn draw_wid_items(
    rng: &mut PiuRng,
    plan: &UnlearnPlan,
    anchor_samples: &[Vec<f64>],
    n: usize,
    world: &SynthWorld,
    schedule: &NoiseSchedule,
) -> Result<Vec<WidItem>> {
    (0..n)
        .map(|_| {
            let c = &anchor_samples[rng.random_range(0..anchor_samples.len())];
            let (item, x) =
                noised_real_item(rng, world, schedule, c, Condition::Embedding(c.clone()))?;
            let c_f = plan.forget_sources[rng.random_range(0..plan.forget_sources.len())].clone();
            Ok(WidItem {
                zt: item.zt,
                t: item.t,
                c_f,
                s_id: world.recognize(&x)?.0,
            })
        })
        .collect()
}

/// Anchor matching (η = 0, no preservation) plus the identity-consistency term.
/// Batches for the matching term are drawn exactly as in [`crate::unlearn::run_unlearning`];
/// the identity term uses its own random stream.
pub fn run_wid(
    frozen: &DenoiserParams,
    dataset: &IdentityDataset,
    forget_identity: usize,
    cfg: &WidConfig,
    base: &UnlearnConfig,
    schedule: &NoiseSchedule,
    world: &SynthWorld,
) -> Result<UnlearnRun> {
    if !(cfg.lambda_id >= 0.0) {
        return invalid("lambda_id must be non-negative");
    }
    if cfg.id_batch == 0 {
        return invalid("id_batch must be at least 1");
    }
    let ucfg = cfg.unlearn_config(base);
    let plan = UnlearnPlan::prepare(frozen, dataset, forget_identity, &ucfg, schedule)?;
    let anchor_samples: Vec<Vec<f64>> = dataset
        .members(plan.anchor)
        .iter()
        .map(|&m| dataset.samples()[m].embedding.0.clone())
        .collect();
    let mut id_rng = substream(ucfg.seed, WID_ID_STREAM);
    let mut term = |params: &DenoiserParams, grads: &mut DenoiserParams| -> Result<f64> {
        let items = draw_wid_items(
            &mut id_rng,
            &plan,
            &anchor_samples,
            cfg.id_batch,
            world,
            schedule,
        )?;
        let (loss, g) = wid_identity_term(params, &items, cfg.lambda_id, world, schedule)?;
        grads.add_scaled(&g, 1.0);
        Ok(loss)
    };
    let (params, log) = train_with_plan(frozen, &plan, &ucfg, schedule, Some(&mut term))?;
    Ok(UnlearnRun { params, log, plan })
}
