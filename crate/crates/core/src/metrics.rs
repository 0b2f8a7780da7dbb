//! Evaluation suite: identity score matching, selective removal/keep,
//! unbiased kernel distance and layerwise identity separation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::{sample, DenoiserParams, NoiseSchedule, SynthWorld};
use crate::error::{invalid, Result};
use crate::idspace::{cosine_sim, IdentityDataset, Split};
use crate::linalg::dot;
use crate::rng::{gaussian_vec, rng_from_seed};

/// Mean cosine similarity of generated embeddings to an identity centroid.
pub fn ism<V: AsRef<[f64]>>(generated: &[V], centroid: &[f64]) -> Result<f64> {
    if generated.is_empty() {
        return invalid("ISM of an empty sample set");
    }
    let mut total = 0.0;
    for g in generated {
        total += cosine_sim(g.as_ref(), centroid)?;
    }
    Ok(total / generated.len() as f64)
}

/// Identity whose centroid has the highest cosine similarity; ties go to the lowest label.
pub fn classify_nearest_centroid(
    embedding: &[f64],
    centroids: &BTreeMap<usize, Vec<f64>>,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&id, mu) in centroids {
        let s = cosine_sim(embedding, mu)?;
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((id, s));
        }
    }
    best.map(|(id, _)| id)
        .ok_or_else(|| crate::PiuError::InvalidArgument("no centroids to classify against".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Forget,
    Retain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Prediction {
    pub predicted: usize,
    pub truth: usize,
    pub group: Group,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrkScore {
    pub acc_u: f64,
    pub acc_r: f64,
    pub srk: f64,
}

pub fn srk_from_accuracies(acc_u: f64, acc_r: f64, epsilon: f64) -> f64 {
    acc_r / (acc_u + epsilon)
}

/// `AccR / (AccU + epsilon)` from nearest-centroid predictions.
pub fn srk(predictions: &[Prediction], epsilon: f64) -> Result<SrkScore> {
    let accuracy = |group: Group| -> Result<f64> {
        let members: Vec<_> = predictions.iter().filter(|p| p.group == group).collect();
        if members.is_empty() {
            return invalid(format!("no predictions in the {group:?} group"));
        }
        Ok(members.iter().filter(|p| p.predicted == p.truth).count() as f64 / members.len() as f64)
    };
    let acc_u = accuracy(Group::Forget)?;
    let acc_r = accuracy(Group::Retain)?;
    Ok(SrkScore {
        acc_u,
        acc_r,
        srk: srk_from_accuracies(acc_u, acc_r, epsilon),
    })
}

/// Cubic polynomial kernel `(aᵀb / d + 1)³`.
pub fn cubic_kernel(a: &[f64], b: &[f64]) -> f64 {
    (dot(a, b) / a.len() as f64 + 1.0).powi(3)
}

/// Unbiased estimate of squared MMD under [`cubic_kernel`]. May be slightly negative.
pub fn mmd2_unbiased<V: AsRef<[f64]>>(x: &[V], y: &[V]) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return invalid("unbiased MMD needs at least two samples per set");
    }
    let dim = x[0].as_ref().len();
    if x.iter().chain(y).any(|v| v.as_ref().len() != dim) {
        return invalid("MMD inputs have mismatched dimensions");
    }
    let within = |s: &[V]| -> f64 {
        let n = s.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += cubic_kernel(s[i].as_ref(), s[j].as_ref());
                }
            }
        }
        acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += cubic_kernel(a.as_ref(), b.as_ref());
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (x.len() * y.len()) as f64)
}

/// Inputs for [`layer_separation`].
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationProbe {
    /// Identity label with its condition embeddings (at least two each).
    pub identities: Vec<(usize, Vec<Vec<f64>>)>,
    pub timesteps: Vec<usize>,
    /// Shared latents fed to every condition when measuring queries.
    pub latents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSpec {
    pub identities: usize,
    pub embeddings_per_identity: usize,
    pub latents: usize,
    pub seed: u64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            identities: 8,
            embeddings_per_identity: 4,
            latents: 8,
            seed: 0,
        }
    }
}

impl SeparationProbe {
    /// Probe over the lowest-labelled identities with at least two samples,
    /// querying at `ceil(0.75 T)` and `T`.
    pub fn from_dataset(
        dataset: &IdentityDataset,
        schedule: &NoiseSchedule,
        latent_dim: usize,
        spec: &ProbeSpec,
    ) -> Result<Self> {
        let identities: Vec<(usize, Vec<Vec<f64>>)> = dataset
            .identities()
            .filter(|&id| dataset.members(id).len() >= 2)
            .take(spec.identities)
            .map(|id| {
                let embs = dataset
                    .members(id)
                    .iter()
                    .take(spec.embeddings_per_identity.max(2))
                    .map(|&m| dataset.samples()[m].embedding.0.clone())
                    .collect();
                (id, embs)
            })
            .collect();
        if identities.len() < 2 {
            return invalid("separation probe needs two identities with at least two samples");
        }
        let big_t = schedule.steps();
        let mut timesteps = vec![(3 * big_t).div_ceil(4).max(1), big_t];
        timesteps.dedup();
        let mut rng = rng_from_seed(spec.seed);
        let latents = (0..spec.latents.max(1))
            .map(|_| gaussian_vec(&mut rng, latent_dim))
            .collect();
        Ok(Self {
            identities,
            timesteps,
            latents,
        })
    }
}

/// Identity separation of one conditioning block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub tag: String,
    pub s_kv: f64,
    pub s_q: f64,
}

impl LayerScore {
    pub fn combined(&self) -> f64 {
        self.s_kv + self.s_q
    }
}

/// Mean cosine similarity over within-identity pairs and over cross-identity pairs.
fn intra_inter(features: &[(usize, Vec<f64>)]) -> Result<(f64, f64)> {
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            let s = cosine_sim(&features[i].1, &features[j].1)?;
            if features[i].0 == features[j].0 {
                intra += s;
                n_intra += 1;
            } else {
                inter += s;
                n_inter += 1;
            }
        }
    }
    Ok((intra / n_intra.max(1) as f64, inter / n_inter.max(1) as f64))
}

/// `S^KV = Intra^KV - Inter^KV` and `S^Q = 1 - mean_t Inter^Q_t` for every block.
///
/// K/V features are the flattened key and value sequences (condition token and
/// null token); Q features are the flattened query matrix.
pub fn layer_separation(
    params: &DenoiserParams,
    probe: &SeparationProbe,
) -> Result<Vec<LayerScore>> {
    if probe.identities.len() < 2 {
        return invalid("separation needs at least two identities");
    }
    if let Some((id, _)) = probe.identities.iter().find(|(_, e)| e.len() < 2) {
        return invalid(format!("identity {id} has fewer than two probe embeddings"));
    }
    if probe.timesteps.is_empty() || probe.latents.is_empty() {
        return invalid("probe needs at least one timestep and one latent");
    }
    let blocks = params.dims().blocks;
    let mut kv_feats: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); blocks];
    for (id, embs) in &probe.identities {
        for c in embs {
            let kv = params.kv_activations(c)?;
            for (b, (k, v)) in kv.into_iter().enumerate() {
                let null_k = &params
                    .matrix(&format!("L{}.null_k", b + 1))
                    .expect("block exists")
                    .data;
                let null_v = &params
                    .matrix(&format!("L{}.null_v", b + 1))
                    .expect("block exists")
                    .data;
                let mut f = k;
                f.extend_from_slice(null_k);
                f.extend_from_slice(&v);
                f.extend_from_slice(null_v);
                kv_feats[b].push((*id, f));
            }
        }
    }

    let mut q_inter_sum = vec![0.0; blocks];
    for &t in &probe.timesteps {
        let mut per_t = vec![0.0; blocks];
        for z in &probe.latents {
            let mut q_feats: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); blocks];
            for (id, embs) in &probe.identities {
                for c in embs {
                    for (b, act) in params.block_activations(z, t, c)?.into_iter().enumerate() {
                        q_feats[b].push((*id, act.query.data));
                    }
                }
            }
            for b in 0..blocks {
                per_t[b] += intra_inter(&q_feats[b])?.1;
            }
        }
        for b in 0..blocks {
            q_inter_sum[b] += per_t[b] / probe.latents.len() as f64;
        }
    }

    (0..blocks)
        .map(|b| {
            let (intra, inter) = intra_inter(&kv_feats[b])?;
            Ok(LayerScore {
                tag: params.block_tags()[b].clone(),
                s_kv: intra - inter,
                s_q: 1.0 - q_inter_sum[b] / probe.timesteps.len() as f64,
            })
        })
        .collect()
}

/// Evaluation protocol knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated samples per evaluated identity.
    pub n_samples: usize,
    pub seed: u64,
    pub guidance_scale: f64,
    pub srk_epsilon: f64,
    /// Cap on the number of retain validation identities sampled (lowest labels first).
    pub max_retain_identities: Option<usize>,
    pub probe: ProbeSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 25,
            seed: 0,
            guidance_scale: 1.0,
            srk_epsilon: 1e-2,
            max_retain_identities: None,
            probe: ProbeSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ism_forget: f64,
    pub ism_retain: f64,
    pub acc_u: f64,
    pub acc_r: f64,
    pub srk: f64,
    #[serde(skip, default = "default_srk_epsilon")]
    pub srk_epsilon: f64,
    pub mmd2_forget: f64,
    pub mmd2_retain: f64,
    pub layers: Vec<LayerScore>,
}

fn default_srk_epsilon() -> f64 {
    1e-2
}

/// Recognition embeddings of generated samples, one per condition.
pub fn generate_embeddings(
    params: &DenoiserParams,
    world: &SynthWorld,
    schedule: &NoiseSchedule,
    conds: &[&[f64]],
    guidance_scale: f64,
    seeds: impl Iterator<Item = u64>,
) -> Result<Vec<Vec<f64>>> {
    conds
        .iter()
        .zip(seeds)
        .map(|(c, s)| {
            let z = sample(params, c, schedule, guidance_scale, s)?;
            Ok(world.recognize(&world.decode(&z.values)?)?.0)
        })
        .collect()
}

fn sample_seed(base: u64, group: u64, identity: usize, j: usize) -> u64 {
    // splitmix64 finalizer over the packed coordinates
    let mut z =
        base ^ group.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((identity as u64) << 20) ^ (j as u64);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Retain validation identities that evaluation samples, in label order.
pub fn retain_eval_identities(dataset: &IdentityDataset, cfg: &EvalConfig) -> Vec<usize> {
    let mut ids: Vec<usize> = dataset
        .split_samples(Split::RetainVal)
        .map(|s| s.identity)
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if let Some(cap) = cfg.max_retain_identities {
        ids.truncate(cap);
    }
    ids
}

/// Generated recognition embeddings for one identity, conditioned on its samples of `split`.
pub fn generate_for_identity(
    params: &DenoiserParams,
    dataset: &IdentityDataset,
    world: &SynthWorld,
    schedule: &NoiseSchedule,
    identity: usize,
    split: Split,
    cfg: &EvalConfig,
) -> Result<Vec<Vec<f64>>> {
    let conds: Vec<&[f64]> = dataset
        .members(identity)
        .iter()
        .map(|&m| &dataset.samples()[m])
        .filter(|s| s.split == split)
        .map(|s| s.embedding.as_slice())
        .collect();
    if conds.is_empty() {
        return invalid(format!("identity {identity} has no {split} samples"));
    }
    let cycled: Vec<&[f64]> = (0..cfg.n_samples).map(|j| conds[j % conds.len()]).collect();
    let group = if split.is_forget() { 1 } else { 2 };
    generate_embeddings(
        params,
        world,
        schedule,
        &cycled,
        cfg.guidance_scale,
        (0..cfg.n_samples).map(|j| sample_seed(cfg.seed, group, identity, j)),
    )
}

/// Samples, decodes and recognizes generations for the forget identity and the
/// retain validation identities, then scores them.
pub fn evaluate(
    params: &DenoiserParams,
    dataset: &IdentityDataset,
    world: &SynthWorld,
    schedule: &NoiseSchedule,
    forget_identity: usize,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    if cfg.n_samples == 0 {
        return invalid("evaluation needs at least one sample per identity");
    }
    let mu_f = dataset.centroid(forget_identity).ok_or_else(|| {
        crate::PiuError::InvalidArgument(format!("unknown forget identity {forget_identity}"))
    })?;
    let forget_gen = generate_for_identity(
        params,
        dataset,
        world,
        schedule,
        forget_identity,
        Split::ForgetVal,
        cfg,
    )?;
    let retain_ids = retain_eval_identities(dataset, cfg);
    if retain_ids.is_empty() {
        return invalid("dataset has no retain validation identities");
    }

    let centroids = dataset.centroids();
    let mut predictions = Vec::new();
    for g in &forget_gen {
        predictions.push(Prediction {
            predicted: classify_nearest_centroid(g, centroids)?,
            truth: forget_identity,
            group: Group::Forget,
        });
    }
    let mut retain_gen = Vec::new();
    let mut ism_retain = 0.0;
    for &r in &retain_ids {
        let gens =
            generate_for_identity(params, dataset, world, schedule, r, Split::RetainVal, cfg)?;
        ism_retain += ism(&gens, dataset.centroid(r).expect("identity from dataset"))?;
        for g in &gens {
            predictions.push(Prediction {
                predicted: classify_nearest_centroid(g, centroids)?,
                truth: r,
                group: Group::Retain,
            });
        }
        retain_gen.extend(gens);
    }
    ism_retain /= retain_ids.len() as f64;

    let reference: Vec<Vec<f64>> = dataset
        .split_samples(Split::RetainVal)
        .map(|s| s.embedding.0.clone())
        .collect();
    let score = srk(&predictions, cfg.srk_epsilon)?;
    let probe =
        SeparationProbe::from_dataset(dataset, schedule, params.dims().latent_dim, &cfg.probe)?;
    Ok(MetricsReport {
        ism_forget: ism(&forget_gen, mu_f)?,
        ism_retain,
        acc_u: score.acc_u,
        acc_r: score.acc_r,
        srk: score.srk,
        srk_epsilon: cfg.srk_epsilon,
        mmd2_forget: mmd2_unbiased(&forget_gen, &reference)?,
        mmd2_retain: mmd2_unbiased(&retain_gen, &reference)?,
        layers: layer_separation(params, &probe)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DenoiserSpec;
    use proptest::prelude::*;

    #[test]
    fn ism_examples() {
        let c = vec![0.6, 0.8];
        assert!((ism(&[c.clone(), c.clone()], &c).unwrap() - 1.0).abs() < 1e-15);
        let neg = vec![-0.6, -0.8];
        assert!(ism(&[c.clone(), neg], &c).unwrap().abs() < 1e-15);
        assert!((ism(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(ism::<Vec<f64>>(&[], &c).is_err());
    }

    #[test]
    fn srk_examples() {
        assert!((srk_from_accuracies(1.0, 1.0, 1e-2) - 0.990_099_009_900_990_1).abs() < 1e-15);
        assert_eq!(srk_from_accuracies(0.0, 1.0, 1e-2), 100.0);
        assert!((srk_from_accuracies(0.2, 0.8, 1e-2) - 3.809_523_809_523_809_4).abs() < 1e-12);
    }

    #[test]
    fn srk_from_predictions() {
        let p = |predicted, truth, group| Prediction {
            predicted,
            truth,
            group,
        };
        let preds = [
            p(0, 0, Group::Forget),
            p(3, 0, Group::Forget),
            p(3, 0, Group::Forget),
            p(3, 0, Group::Forget),
            p(0, 0, Group::Forget),
            p(1, 1, Group::Retain),
            p(2, 2, Group::Retain),
            p(2, 2, Group::Retain),
            p(2, 2, Group::Retain),
            p(0, 1, Group::Retain),
        ];
        let s = srk(&preds, 1e-2).unwrap();
        assert_eq!((s.acc_u, s.acc_r), (0.4, 0.8));
        assert_eq!(s.srk * (s.acc_u + 1e-2), s.acc_r);
        assert!(srk(&preds[..5], 1e-2).is_err());
    }

    #[test]
    fn nearest_centroid_is_scale_free_and_breaks_ties_low() {
        let mut cents = BTreeMap::new();
        cents.insert(4, vec![1.0, 0.0]);
        cents.insert(2, vec![0.0, 1.0]);
        assert_eq!(classify_nearest_centroid(&[0.9, 0.1], &cents).unwrap(), 4);
        let mut scaled = cents.clone();
        scaled.insert(4, vec![17.0, 0.0]);
        scaled.insert(2, vec![0.0, 0.01]);
        assert_eq!(classify_nearest_centroid(&[0.9, 0.1], &scaled).unwrap(), 4);
        assert_eq!(classify_nearest_centroid(&[1.0, 1.0], &cents).unwrap(), 2);
    }

    #[test]
    fn mmd_hand_instance() {
        let x = vec![vec![0.0], vec![0.0]];
        let y = vec![vec![1.0], vec![1.0]];
        // k(0,0)=1, k(1,1)=8, k(0,1)=1
        assert_eq!(mmd2_unbiased(&x, &y).unwrap(), 7.0);
        assert_eq!(mmd2_unbiased(&y, &x).unwrap(), 7.0);
        assert!(mmd2_unbiased(&x[..1], &y).is_err());
    }

    #[test]
    fn mmd_grows_with_mean_separation() {
        let mut rng = rng_from_seed(3);
        let base: Vec<Vec<f64>> = (0..150).map(|_| gaussian_vec(&mut rng, 1)).collect();
        let other: Vec<Vec<f64>> = (0..150).map(|_| gaussian_vec(&mut rng, 1)).collect();
        let mut last = f64::NEG_INFINITY;
        for shift in [0.5, 1.0, 2.0] {
            let shifted: Vec<Vec<f64>> = other.iter().map(|v| vec![v[0] + shift]).collect();
            let m = mmd2_unbiased(&base, &shifted).unwrap();
            assert!(m > last, "shift {shift}: {m} <= {last}");
            last = m;
        }
    }

    fn probe_params() -> DenoiserParams {
        DenoiserParams::init(
            &DenoiserSpec {
                tokens: 2,
                width: 4,
                blocks: 3,
                ff_hidden: 4,
                init_seed: 2,
            },
            4,
            3,
        )
        .unwrap()
    }

    fn probe(seed: u64) -> SeparationProbe {
        let mut rng = rng_from_seed(seed);
        SeparationProbe {
            identities: (0..3)
                .map(|id| (id, (0..3).map(|_| gaussian_vec(&mut rng, 3)).collect()))
                .collect(),
            timesteps: vec![15, 20],
            latents: (0..4).map(|_| gaussian_vec(&mut rng, 4)).collect(),
        }
    }

    #[test]
    fn condition_blind_block_has_zero_kv_separation() {
        let mut p = probe_params();
        p.matrix_mut("L2.k").unwrap().scale(0.0);
        p.matrix_mut("L2.v").unwrap().scale(0.0);
        let scores = layer_separation(&p, &probe(1)).unwrap();
        assert_eq!(scores[1].s_kv, 0.0);
        // first block queries never see the condition
        assert!(scores[0].s_q.abs() < 1e-12);
    }

    #[test]
    fn orthogonal_identities_have_unit_kv_separation() {
        // condition token only: zero null tokens so K/V features are c W
        let mut p = DenoiserParams::init(
            &DenoiserSpec {
                tokens: 1,
                width: 2,
                blocks: 1,
                ff_hidden: 1,
                init_seed: 0,
            },
            2,
            2,
        )
        .unwrap();
        p.matrix_mut("L1.k")
            .unwrap()
            .data
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.matrix_mut("L1.v")
            .unwrap()
            .data
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p.matrix_mut("L1.null_k").unwrap().scale(0.0);
        p.matrix_mut("L1.null_v").unwrap().scale(0.0);
        let probe = SeparationProbe {
            identities: vec![
                (0, vec![vec![1.0, 0.0], vec![2.0, 0.0]]),
                (1, vec![vec![0.0, 1.0], vec![0.0, 3.0]]),
            ],
            timesteps: vec![1],
            latents: vec![vec![0.3, -0.2]],
        };
        let s = layer_separation(&p, &probe).unwrap();
        assert!((s[0].s_kv - 1.0).abs() < 1e-15);
    }

    #[test]
    fn separation_rejects_single_embedding_identities() {
        let mut pr = probe(2);
        pr.identities[1].1.truncate(1);
        assert!(layer_separation(&probe_params(), &pr).is_err());
    }

    #[test]
    fn separation_is_invariant_to_identity_order() {
        let p = probe_params();
        let pr = probe(4);
        let mut rev = pr.clone();
        rev.identities.reverse();
        for (a, b) in layer_separation(&p, &pr)
            .unwrap()
            .iter()
            .zip(layer_separation(&p, &rev).unwrap())
        {
            assert!((a.s_kv - b.s_kv).abs() < 1e-12);
            assert!((a.s_q - b.s_q).abs() < 1e-12);
        }
    }

    #[test]
    fn kv_separation_ignores_probe_latents_and_timesteps() {
        let p = probe_params();
        let a = probe(5);
        let mut b = a.clone();
        b.latents = probe(6).latents;
        b.timesteps = vec![3];
        for (x, y) in layer_separation(&p, &a)
            .unwrap()
            .iter()
            .zip(layer_separation(&p, &b).unwrap())
        {
            assert!((x.s_kv - y.s_kv).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn ism_is_invariant_to_centroid_scale(seed in any::<u64>(), scale in 0.01f64..100.0) {
            let mut rng = rng_from_seed(seed);
            let gens: Vec<Vec<f64>> = (0..5).map(|_| gaussian_vec(&mut rng, 3)).collect();
            let c = gaussian_vec(&mut rng, 3);
            let sc: Vec<f64> = c.iter().map(|x| x * scale).collect();
            prop_assert!((ism(&gens, &c).unwrap() - ism(&gens, &sc).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn mmd_is_symmetric(seed in any::<u64>()) {
            let mut rng = rng_from_seed(seed);
            let x: Vec<Vec<f64>> = (0..6).map(|_| gaussian_vec(&mut rng, 2)).collect();
            let y: Vec<Vec<f64>> = (0..4).map(|_| gaussian_vec(&mut rng, 2)).collect();
            prop_assert!((mmd2_unbiased(&x, &y).unwrap() - mmd2_unbiased(&y, &x).unwrap()).abs() < 1e-12);
        }
    }
}
