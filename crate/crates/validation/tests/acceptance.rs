//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use sha2::{Digest, Sha256};

use piu_core::baselines::{
    run_wid, uce_edit, wid_identity_loss, wid_loss_and_grad, UceEditRequest, WidConfig, WidItem,
};
use piu_core::diffusion::{
    checkpoint, eps_mse_loss_and_grad, forward_diffuse, make_schedule, Condition, DenoiserParams,
    DenoiserSpec, Latent, NoiseSchedule, NoisedItem, SynthWorld, WorldSpec,
    MASKABLE_BLOCK_MATRICES,
};
use piu_core::idspace::{
    anchor_candidates, cluster_identities, AnchorQuery, IdentityDataset, IdentityEmbedding, Sample,
    Split, NOISE,
};
use piu_core::linalg::{dot, normalized, Mat};
use piu_core::metrics::{
    classify_nearest_centroid, mmd2_unbiased, srk_from_accuracies, MetricsReport,
};
use piu_core::rng::{gaussian_vec, rng_from_seed, PiuRng};
use piu_core::unlearn::{
    forget_target, forget_target_from_predictions, piu_loss_and_grad, piu_losses, run_unlearning,
    ForgetItem, RetainItem, UnlearnConfig,
};
use piu_harness::{parse_config, parse_config_str, run_pipeline, ExperimentConfig, Method, Setup};

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn unit(rng: &mut PiuRng, d: usize) -> Vec<f64> {
    normalized(&gaussian_vec(rng, d))
}

// ---------------------------------------------------------------- 1

fn formula_oracles() -> Check {
    let s = srk_from_accuracies(1.0, 1.0, 1e-2);
    ensure((s - 0.9901).abs() < 5e-5, || format!("SRK(1,1,0.01) = {s}"))?;
    let ft = forget_target_from_predictions(&[2.0], &[5.0], 1.5)[0];
    ensure(ft == -2.5, || format!("forget target = {ft}"))?;
    let m = mmd2_unbiased(&[vec![0.0], vec![0.0]], &[vec![1.0], vec![1.0]])
        .map_err(|e| e.to_string())?;
    ensure((m - 7.0).abs() < 1e-12, || format!("MMD² = {m}"))?;
    let mut rng = rng_from_seed(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(2..=16);
        let (u, v) = (unit(&mut rng, d), unit(&mut rng, d));
        let half_sq: f64 = 0.5
            * u.iter()
                .zip(&v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        worst = worst.max((wid_identity_loss(&u, &v).map_err(|e| e.to_string())? - half_sq).abs());
    }
    ensure(worst < 1e-12, || format!("WID unit-pair gap {worst:e}"))?;
    Ok(format!(
        "SRK={s:.4} target={ft} MMD²={m} WID gap={worst:.1e}"
    ))
}

// ---------------------------------------------------------------- 2

fn random_request(rng: &mut PiuRng) -> UceEditRequest {
    let out = rng.random_range(1..=8);
    let inp = rng.random_range(1..=8);
    let ne = rng.random_range(0..=4);
    let np = rng.random_range(0..=6);
    let w_old = Mat::from_vec(out, inp, gaussian_vec(rng, out * inp));
    let edit_pairs = (0..ne)
        .map(|_| (gaussian_vec(rng, inp), gaussian_vec(rng, out)))
        .collect();
    let preserve = (0..np).map(|_| gaussian_vec(rng, inp)).collect();
    UceEditRequest {
        w_old,
        edit_pairs,
        preserve,
        alpha_e: rng.random_range(0.1..20.0),
        alpha_p: rng.random_range(0.1..5.0),
        lambda_reg: rng.random_range(0.05..2.0),
    }
}

fn frob_dot(a: &Mat, b: &Mat) -> f64 {
    dot(&a.data, &b.data)
}

/// Matrix-free conjugate gradient on the (quadratic) objective, driven only by
/// its gradient.
fn conjugate_gradient(req: &UceEditRequest) -> Mat {
    let zero = Mat::zeros(req.w_old.rows, req.w_old.cols);
    let g0 = req.objective_grad(&zero);
    let hess = |d: &Mat| {
        let mut h = req.objective_grad(d);
        for (x, y) in h.data.iter_mut().zip(&g0.data) {
            *x -= y;
        }
        h
    };
    let mut w = req.w_old.clone();
    let mut r = req.objective_grad(&w);
    r.scale(-1.0);
    let mut p = r.clone();
    let mut rr = frob_dot(&r, &r);
    for _ in 0..(4 * w.len() + 10) {
        if rr.sqrt() < 1e-15 {
            break;
        }
        let hp = hess(&p);
        let a = rr / frob_dot(&p, &hp);
        for i in 0..w.data.len() {
            w.data[i] += a * p.data[i];
            r.data[i] -= a * hp.data[i];
        }
        let rr_new = frob_dot(&r, &r);
        for i in 0..p.data.len() {
            p.data[i] = r.data[i] + rr_new / rr * p.data[i];
        }
        rr = rr_new;
    }
    w
}

fn uce_exactness() -> Check {
    let mut rng = rng_from_seed(22);
    let (mut worst_grad, mut worst_iter, mut worst_empty) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let req = random_request(&mut rng);
        let w = uce_edit(&req).map_err(|e| e.to_string())?;
        let scale = req
            .objective_grad(&req.w_old)
            .frobenius_norm()
            .max(w.frobenius_norm())
            .max(1.0);
        worst_grad = worst_grad.max(req.objective_grad(&w).frobenius_norm() / scale);
        let it = conjugate_gradient(&req);
        worst_iter = worst_iter.max(
            w.data
                .iter()
                .zip(&it.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        let empty = UceEditRequest {
            edit_pairs: Vec::new(),
            ..req.clone()
        };
        let we = uce_edit(&empty).map_err(|e| e.to_string())?;
        worst_empty = worst_empty.max(
            we.data
                .iter()
                .zip(&req.w_old.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    ensure(worst_grad < 1e-8, || {
        format!("relative gradient {worst_grad:e}")
    })?;
    ensure(worst_iter < 1e-6, || {
        format!("iterative mismatch {worst_iter:e}")
    })?;
    ensure(worst_empty < 1e-12, || {
        format!("empty edit drift {worst_empty:e}")
    })?;
    Ok(format!(
        "grad {worst_grad:.1e}, vs CG {worst_iter:.1e}, E=∅ {worst_empty:.1e}"
    ))
}

// ---------------------------------------------------------------- 3

struct Toy {
    params: DenoiserParams,
    frozen: DenoiserParams,
    world: SynthWorld,
    schedule: NoiseSchedule,
    cond_dim: usize,
}

fn toy(seed: u64) -> Toy {
    let cond_dim = 3;
    let world = SynthWorld::generate(&WorldSpec {
        identity_dim: cond_dim,
        style_dim: 1,
        observation_dim: 6,
        style_scale: 0.3,
        seed,
    })
    .unwrap();
    let spec = DenoiserSpec {
        tokens: 2,
        width: 4,
        blocks: 2,
        ff_hidden: 4,
        init_seed: seed,
    };
    let params = DenoiserParams::init(&spec, world.latent_dim(), cond_dim).unwrap();
    let mut frozen = params.clone();
    let mut rng = rng_from_seed(seed ^ 0xF0);
    let mut shift = frozen.zeros_like();
    for m in shift.mats_mut() {
        m.data = gaussian_vec(&mut rng, m.data.len());
    }
    frozen.add_scaled(&shift, 0.05);
    Toy {
        params,
        frozen,
        world,
        schedule: make_schedule(20, 1e-3, 0.2).unwrap(),
        cond_dim,
    }
}

fn noised(rng: &mut PiuRng, toy: &Toy) -> (Vec<f64>, usize) {
    let t = rng.random_range(1..=toy.schedule.steps());
    let z0 = Latent::clean(gaussian_vec(rng, toy.world.latent_dim()));
    let eps = gaussian_vec(rng, z0.values.len());
    (
        forward_diffuse(&z0, t, &eps, &toy.schedule).unwrap().values,
        t,
    )
}

/// Worst relative error between analytic and central-difference directional
/// derivatives over `probes` random directions.
fn fd_check(
    params: &DenoiserParams,
    probes: usize,
    seed: u64,
    f: impl Fn(&DenoiserParams) -> (f64, DenoiserParams),
) -> f64 {
    let mut rng = rng_from_seed(seed);
    let (_, g) = f(params);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut dir = params.zeros_like();
        for m in dir.mats_mut() {
            m.data = gaussian_vec(&mut rng, m.data.len());
        }
        let an: f64 = dot(&g.flatten(), &dir.flatten());
        let mut plus = params.clone();
        plus.add_scaled(&dir, h);
        let mut minus = params.clone();
        minus.add_scaled(&dir, -h);
        let fd = (f(&plus).0 - f(&minus).0) / (2.0 * h);
        worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-8));
    }
    worst
}

fn gradient_fidelity() -> Check {
    let toy = toy(5);
    let n = toy.params.param_count();
    ensure(n <= 500, || format!("toy network has {n} parameters"))?;
    let mut rng = rng_from_seed(33);
    let c = |rng: &mut PiuRng| gaussian_vec(rng, toy.cond_dim);

    let base_items: Vec<NoisedItem> = (0..4)
        .map(|i| {
            let t = rng.random_range(1..=toy.schedule.steps());
            let z0 = Latent::clean(gaussian_vec(&mut rng, toy.world.latent_dim()));
            let eps = gaussian_vec(&mut rng, z0.values.len());
            let zt = forward_diffuse(&z0, t, &eps, &toy.schedule).unwrap().values;
            let cond = if i == 0 {
                Condition::Null
            } else {
                Condition::Embedding(c(&mut rng))
            };
            NoisedItem { zt, t, eps, cond }
        })
        .collect();
    let e_base = fd_check(&toy.params, 20, 1, |p| {
        eps_mse_loss_and_grad(p, &base_items).unwrap()
    });

    let fb: Vec<ForgetItem> = (0..3)
        .map(|_| {
            let (zt, t) = noised(&mut rng, &toy);
            ForgetItem {
                zt,
                t,
                c_f: c(&mut rng),
                c_a: c(&mut rng),
            }
        })
        .collect();
    let rb: Vec<RetainItem> = (0..3)
        .map(|_| {
            let (zt, t) = noised(&mut rng, &toy);
            RetainItem {
                zt,
                t,
                c_r: c(&mut rng),
            }
        })
        .collect();
    let cfg = UnlearnConfig::default();
    let e_piu = fd_check(&toy.params, 20, 2, |p| {
        let (l, g) = piu_loss_and_grad(p, &toy.frozen, &fb, &rb, &cfg).unwrap();
        let direct = piu_losses(p, &toy.frozen, &fb, &rb, &cfg).unwrap();
        assert_eq!(l.total.to_bits(), direct.total.to_bits());
        (direct.total, g)
    });

    let id_items: Vec<WidItem> = (0..3)
        .map(|_| {
            let (zt, t) = noised(&mut rng, &toy);
            WidItem {
                zt,
                t,
                c_f: c(&mut rng),
                s_id: unit(&mut rng, toy.cond_dim),
            }
        })
        .collect();
    let e_wid = fd_check(&toy.params, 20, 3, |p| {
        wid_loss_and_grad(
            p,
            &toy.frozen,
            &fb,
            &id_items,
            0.5,
            &toy.world,
            &toy.schedule,
        )
        .unwrap()
    });

    let worst = e_base.max(e_piu).max(e_wid);
    ensure(worst < 1e-4, || {
        format!("relative errors base {e_base:.1e}, piu {e_piu:.1e}, wid {e_wid:.1e}")
    })?;
    Ok(format!(
        "{n} params; relative error base {e_base:.1e}, piu {e_piu:.1e}, wid {e_wid:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

fn small_setup(seed: u64) -> Setup {
    let cfg = parse_config_str(
        r#"{
          "world": { "num_identities": 16, "samples_per_identity": 8, "identity_dim": 8, "style_dim": 2, "observation_dim": 16 },
          "schedule": { "steps": 30 },
          "base": { "steps": 200, "denoiser": { "tokens": 2, "width": 8, "blocks": 3, "ff_hidden": 8 } },
          "unlearn": { "anchor_tolerance": 0.3, "steps": 20, "lr": 0.01, "batch_forget": 8, "batch_retain": 8, "surgical_top_k": 1 },
          "siss": { "steps": 10, "batch_forget": 8, "batch_retain": 8 },
          "wid": { "steps": 10 },
          "eval": { "n_samples": 3, "max_retain_identities": 4 }
        }"#,
    )
    .unwrap();
    Setup::new(&ExperimentConfig { seed, ..cfg }).unwrap()
}

fn reductions() -> Check {
    let s = small_setup(1);
    let frozen = s.base_model().map_err(|e| e.to_string())?;
    let base = UnlearnConfig {
        steps: 20,
        ..s.config.unlearn
    };
    let wid = WidConfig {
        lambda_id: 0.0,
        lr: 1e-2,
        steps: 20,
        id_batch: 4,
    };
    let a = run_wid(
        &frozen,
        &s.dataset,
        s.forget_identity,
        &wid,
        &base,
        &s.schedule,
        &s.world,
    )
    .map_err(|e| e.to_string())?;
    let naive = UnlearnConfig {
        eta: 0.0,
        lambda_preserve: 0.0,
        lr: 1e-2,
        steps: 20,
        ..base
    };
    let b = run_unlearning(&frozen, &s.dataset, s.forget_identity, &naive, &s.schedule)
        .map_err(|e| e.to_string())?;
    ensure(a.log.records.len() == 20, || "WID log length".into())?;
    for (ra, rb) in a.log.records.iter().zip(&b.log.records) {
        ensure(ra.loss_total.to_bits() == rb.loss_total.to_bits(), || {
            format!("loss differs at step {}", ra.step)
        })?;
    }
    ensure(
        checkpoint::to_bytes(&a.params) == checkpoint::to_bytes(&b.params),
        || "final parameters differ".into(),
    )?;

    let mut rng = rng_from_seed(44);
    let d = frozen.dims().cond_dim;
    for _ in 0..20 {
        let t = rng.random_range(1..=s.schedule.steps());
        let zt = Latent {
            values: gaussian_vec(&mut rng, frozen.dims().latent_dim),
            timestep: t,
        };
        let (cf, ca) = (gaussian_vec(&mut rng, d), gaussian_vec(&mut rng, d));
        let target = forget_target(&frozen, &zt, t, &cf, &ca, 0.0).map_err(|e| e.to_string())?;
        let anchor = frozen
            .predict(&zt.values, t, &ca)
            .map_err(|e| e.to_string())?;
        ensure(target == anchor, || {
            "η=0 target differs from the anchor prediction".into()
        })?;
    }
    Ok("WID(λ_id=0) ≡ naive over 20 steps; η=0 target ≡ anchor prediction".into())
}

// ---------------------------------------------------------------- 5

fn cos_dist(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Textbook DBSCAN: grow each cluster from an unassigned core point by
/// repeated neighborhood expansion until a fixed point.
fn reference_dbscan(x: &[Vec<f64>], eps: f64, min_pts: usize) -> (Vec<bool>, Vec<Option<usize>>) {
    let n = x.len();
    let nbrs: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| cos_dist(&x[i], &x[j]) <= eps).collect())
        .collect();
    let core: Vec<bool> = nbrs.iter().map(|v| v.len() >= min_pts).collect();
    let mut cluster: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if !core[i] || cluster[i].is_some() {
            continue;
        }
        let mut members: BTreeSet<usize> = BTreeSet::from([i]);
        loop {
            let grown: BTreeSet<usize> = members
                .iter()
                .filter(|&&m| core[m])
                .flat_map(|&m| nbrs[m].iter().copied())
                .chain(members.iter().copied())
                .collect();
            if grown.len() == members.len() {
                break;
            }
            members = grown;
        }
        for m in members {
            if core[m] || cluster[m].is_none() {
                cluster[m] = Some(next);
            }
        }
        next += 1;
    }
    (core, cluster)
}

fn brute_force() -> Check {
    let mut rng = rng_from_seed(55);
    for inst in 0..30 {
        let n = rng.random_range(1..=50);
        let d = rng.random_range(2..=5);
        let centers: Vec<Vec<f64>> = (0..rng.random_range(1..=4))
            .map(|_| unit(&mut rng, d))
            .collect();
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = &centers[rng.random_range(0..centers.len())];
                c.iter()
                    .zip(gaussian_vec(&mut rng, d))
                    .map(|(a, g)| a + 0.2 * g)
                    .collect()
            })
            .collect();
        let eps = rng.random_range(0.02..0.3);
        let min_pts = rng.random_range(1..=5);
        let got = cluster_identities(&x, eps, min_pts).map_err(|e| e.to_string())?;
        let (core, want) = reference_dbscan(&x, eps, min_pts);
        // core points: identical partition; noise: identical set; border: adjacent to a core point of its cluster
        let mut map: BTreeMap<usize, i64> = BTreeMap::new();
        for i in 0..n {
            match want[i] {
                None => ensure(got[i] == NOISE, || {
                    format!("instance {inst}: point {i} should be noise")
                })?,
                Some(r) if core[i] => {
                    let l = *map.entry(r).or_insert(got[i]);
                    ensure(l == got[i] && l != NOISE, || {
                        format!("instance {inst}: core point {i} mislabeled")
                    })?;
                }
                Some(_) => {}
            }
        }
        let labels: BTreeSet<i64> = map.values().copied().collect();
        ensure(labels.len() == map.len(), || {
            format!("instance {inst}: clusters merged")
        })?;
        for i in (0..n).filter(|&i| !core[i] && want[i].is_some()) {
            let ok = (0..n).any(|j| core[j] && got[j] == got[i] && cos_dist(&x[i], &x[j]) <= eps);
            ensure(got[i] != NOISE && ok, || {
                format!("instance {inst}: border point {i} unattached")
            })?;
        }
    }

    for inst in 0..30 {
        let k = rng.random_range(2..=20);
        let d = rng.random_range(2..=6);
        let samples: Vec<Sample> = (0..k)
            .map(|id| Sample {
                embedding: IdentityEmbedding(unit(&mut rng, d)),
                identity: id,
                split: if id == 0 {
                    Split::ForgetTrain
                } else {
                    Split::RetainTrain
                },
            })
            .collect();
        let ds = IdentityDataset::from_samples(d, samples.clone()).map_err(|e| e.to_string())?;
        let f = rng.random_range(0..k);
        let q = AnchorQuery {
            tau: rng.random_range(-0.5..0.5),
            tolerance: rng.random_range(0.05..0.5),
            forget_identity: f,
            rng_seed: 0,
        };
        let want: Vec<usize> = (0..k)
            .filter(|&j| {
                j != f
                    && ((1.0 - cos_dist(&samples[f].embedding.0, &samples[j].embedding.0)) - q.tau)
                        .abs()
                        < q.tolerance
            })
            .collect();
        let got: Vec<usize> = anchor_candidates(&ds, &q)
            .map(|v| v.into_iter().map(|(j, _)| j).collect())
            .unwrap_or_default();
        ensure(got == want, || {
            format!("anchor instance {inst}: {got:?} vs {want:?}")
        })?;

        let centroids: BTreeMap<usize, Vec<f64>> = ds.centroids().clone();
        for _ in 0..10 {
            let e = gaussian_vec(&mut rng, d);
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for (&id, mu) in &centroids {
                let s = 1.0 - cos_dist(&e, mu);
                if s > best.1 {
                    best = (id, s);
                }
            }
            let got = classify_nearest_centroid(&e, &centroids).map_err(|err| err.to_string())?;
            ensure(got == best.0, || {
                format!("classification instance {inst}: {got} vs {}", best.0)
            })?;
        }
    }
    Ok("30 DBSCAN, 30 anchor-set and 300 classification instances agree".into())
}

// ---------------------------------------------------------------- 6

#[derive(Default, Clone, Copy)]
struct Cell {
    ism_forget: f64,
    ism_retain: f64,
    srk: f64,
    changed: f64,
}

impl Cell {
    fn of(m: &MetricsReport, changed: f64) -> Self {
        Self {
            ism_forget: m.ism_forget,
            ism_retain: m.ism_retain,
            srk: m.srk,
            changed,
        }
    }

    fn add(&mut self, o: &Cell, w: f64) {
        self.ism_forget += w * o.ism_forget;
        self.ism_retain += w * o.ism_retain;
        self.srk += w * o.srk;
        self.changed += w * o.changed;
    }
}

struct Row {
    base: Cell,
    piu: Cell,
    lam0: Cell,
    eta0: Cell,
    full: Cell,
}

fn run_variant(
    setup: &Setup,
    frozen: &DenoiserParams,
    edit: impl Fn(&mut ExperimentConfig),
) -> std::result::Result<Cell, String> {
    let mut s = setup.clone();
    edit(&mut s.config);
    let out = s.unlearn(frozen).map_err(|e| e.to_string())?;
    let m = s.evaluate(&out.params).map_err(|e| e.to_string())?;
    Ok(Cell::of(&m, out.changed_fraction))
}

fn verdicts(r: &Row) -> [bool; 4] {
    [
        r.piu.ism_forget <= 0.6 * r.base.ism_forget && r.piu.ism_retain >= 0.9 * r.base.ism_retain,
        r.lam0.ism_retain <= r.piu.ism_retain - 0.1,
        r.eta0.srk < r.piu.srk,
        r.piu.changed <= 0.5 && (r.piu.ism_forget - r.full.ism_forget).abs() <= 0.05,
    ]
}

fn direction_of_effect() -> Check {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.json");
    let reference = parse_config(&path).map_err(|e| e.to_string())?;
    let seeds = 0..5u64;
    let mut mean = Row {
        base: Cell::default(),
        piu: Cell::default(),
        lam0: Cell::default(),
        eta0: Cell::default(),
        full: Cell::default(),
    };
    let w = 1.0 / seeds.clone().count() as f64;
    for seed in seeds {
        let setup = Setup::new(&ExperimentConfig {
            seed,
            method: Method::Piu,
            ..reference.clone()
        })
        .map_err(|e| e.to_string())?;
        let frozen = setup.base_model().map_err(|e| e.to_string())?;
        let row = Row {
            base: Cell::of(&setup.evaluate(&frozen).map_err(|e| e.to_string())?, 0.0),
            piu: run_variant(&setup, &frozen, |_| {})?,
            lam0: run_variant(&setup, &frozen, |c| c.unlearn.lambda_preserve = 0.0)?,
            eta0: run_variant(&setup, &frozen, |c| c.unlearn.eta = 0.0)?,
            full: run_variant(&setup, &frozen, |c| c.unlearn.surgical = false)?,
        };
        let v = verdicts(&row);
        println!(
            "    seed {seed}: base ism_f {:.3} ism_r {:.3} | piu ism_f {:.3} ism_r {:.3} srk {:.2} changed {:.3} | λ=0 ism_r {:.3} | η=0 srk {:.2} | full ism_f {:.3} | (a,b,c,d) {:?}",
            row.base.ism_forget, row.base.ism_retain, row.piu.ism_forget, row.piu.ism_retain, row.piu.srk, row.piu.changed, row.lam0.ism_retain, row.eta0.srk, row.full.ism_forget, v
        );
        mean.base.add(&row.base, w);
        mean.piu.add(&row.piu, w);
        mean.lam0.add(&row.lam0, w);
        mean.eta0.add(&row.eta0, w);
        mean.full.add(&row.full, w);
    }
    let [a, b, c, d] = verdicts(&mean);
    let summary = format!(
        "5-seed means: (a) ism_f {:.3} ≤ {:.3}, ism_r {:.3} ≥ {:.3}: {a}; (b) λ=0 ism_r {:.3} vs {:.3}: {b}; (c) η=0 srk {:.2} < {:.2}: {c}; (d) changed {:.3}, |Δism_f| {:.3}: {d}",
        mean.piu.ism_forget,
        0.6 * mean.base.ism_forget,
        mean.piu.ism_retain,
        0.9 * mean.base.ism_retain,
        mean.lam0.ism_retain,
        mean.piu.ism_retain,
        mean.eta0.srk,
        mean.piu.srk,
        mean.piu.changed,
        (mean.piu.ism_forget - mean.full.ism_forget).abs()
    );
    if a && b && c && d {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- 7

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn structural() -> Check {
    let setup = small_setup(2);
    let frozen = setup.base_model().map_err(|e| e.to_string())?;
    let before = digest(&checkpoint::to_bytes(&frozen));
    for method in [
        Method::Piu,
        Method::Naive,
        Method::Siss,
        Method::Uce,
        Method::Wid,
    ] {
        let mut s = setup.clone();
        s.config.method = method;
        let out = s.unlearn(&frozen).map_err(|e| e.to_string())?;
        ensure(digest(&checkpoint::to_bytes(&frozen)) == before, || {
            format!("{} mutated the frozen model", method.as_str())
        })?;
        let editable: &[&str] = match method {
            Method::Siss => continue,
            Method::Uce => &["k", "v"],
            _ => &MASKABLE_BLOCK_MATRICES,
        };
        for (name, (a, b)) in frozen
            .names()
            .iter()
            .zip(out.params.mats().iter().zip(frozen.mats()))
        {
            let inside = name.split_once('.').is_some_and(|(tag, local)| {
                out.mask_blocks.iter().any(|m| m == tag) && editable.contains(&local)
            });
            ensure(inside || a == b, || {
                format!("{}: masked-out {name} changed", method.as_str())
            })?;
        }
    }

    let mut rng = rng_from_seed(77);
    let dims = *frozen.dims();
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let z = gaussian_vec(&mut rng, dims.latent_dim);
        let c = gaussian_vec(&mut rng, dims.cond_dim);
        let reference = frozen
            .block_activations(&z, 1, &c)
            .map_err(|e| e.to_string())?;
        for t in 2..=setup.schedule.steps() {
            for (r, a) in reference.iter().zip(
                frozen
                    .block_activations(&z, t, &c)
                    .map_err(|e| e.to_string())?,
            ) {
                for (x, y) in r
                    .key
                    .iter()
                    .chain(&r.value)
                    .zip(a.key.iter().chain(&a.value))
                {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-12, || format!("K/V varies with t by {worst:e}"))?;

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = setup.config.clone();
    cfg.world.forget_identity = None;
    for run in ["a", "b"] {
        run_pipeline(&cfg, Some(&tmp.path().join(run))).map_err(|e| e.to_string())?;
    }
    let mut files = 0;
    for entry in std::fs::read_dir(tmp.path().join("a")).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let a = std::fs::read(tmp.path().join("a").join(&name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(tmp.path().join("b").join(&name)).map_err(|e| e.to_string())?;
        ensure(a == b, || format!("{name:?} differs between runs"))?;
        files += 1;
    }
    Ok(format!("frozen checksum stable over 5 methods; masks respected; K/V drift {worst:.1e}; {files} pipeline files byte-identical"))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("1 formula oracles", formula_oracles),
        ("2 UCE exactness", uce_exactness),
        ("3 gradient fidelity", gradient_fidelity),
        ("4 reduction identities", reductions),
        ("5 brute-force equivalence", brute_force),
        ("6 direction of effect", direction_of_effect),
        ("7 structural invariants", structural),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({secs:.1}s) {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({secs:.1}s) {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
