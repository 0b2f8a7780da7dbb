//! Experiment harness: configuration, the train → analyze → unlearn → evaluate
//! pipeline, base-model caching, run directories and ablation sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use piu_core::baselines::{run_siss, run_uce, run_wid, SissConfig, UceConfig, WidConfig};
use piu_core::diffusion::{
    checkpoint, train_base, DenoiserParams, NoiseSchedule, ScheduleSpec, SynthWorld, TrainConfig,
    WorldSpec,
};
use piu_core::idspace::{
    anchor_candidates, generate_identities, select_anchor, AnchorQuery, GeneratorSpec,
    IdentityDataset, SplitRatios,
};
use piu_core::metrics::{
    evaluate, layer_separation, EvalConfig, LayerScore, MetricsReport, SeparationProbe,
};
use piu_core::unlearn::{
    run_unlearning, surgical_mask_from_scores, SurgicalMask, TrainingLog, UnlearnConfig,
};
use piu_core::PiuError;

/// Environment variable naming the base-model cache directory.
pub const CACHE_ENV: &str = "PIU_CACHE_DIR";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{stage} failed: {source}")]
    Runtime {
        stage: &'static str,
        #[source]
        source: PiuError,
    },
    #[error("{failed} of {total} sweep runs failed")]
    SweepFailed {
        failed: usize,
        total: usize,
        status: i32,
    },
}

impl HarnessError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Runtime { .. } => 3,
            HarnessError::Io { .. } => 4,
            HarnessError::SweepFailed { status, .. } => *status,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn stage(stage: &'static str) -> impl FnOnce(PiuError) -> HarnessError {
    move |source| HarnessError::Runtime { stage, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Piu,
    /// Anchor matching without negative guidance or preservation.
    Naive,
    Siss,
    Uce,
    Wid,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Piu => "piu",
            Method::Naive => "naive",
            Method::Siss => "siss",
            Method::Uce => "uce",
            Method::Wid => "wid",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| HarnessError::Config(format!("unknown method {s:?}")))
    }
}

/// Synthetic world and identity population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub spread: f64,
    pub identity_dim: usize,
    pub style_dim: usize,
    pub observation_dim: usize,
    pub style_scale: f64,
    /// Identity to forget; when absent the lowest label with a non-empty anchor set is used.
    pub forget_identity: Option<usize>,
    pub ratios: SplitRatios,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_identities: 64,
            samples_per_identity: 12,
            spread: 0.15,
            identity_dim: 32,
            style_dim: 4,
            observation_dim: 64,
            style_scale: 0.3,
            forget_identity: None,
            ratios: SplitRatios::default(),
        }
    }
}

/// Every knob of one experiment. `seed` is the master seed from which the
/// component seeds are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub world: WorldConfig,
    pub schedule: ScheduleSpec,
    pub base: TrainConfig,
    pub unlearn: UnlearnConfig,
    pub siss: SissConfig,
    pub uce: UceConfig,
    pub wid: WidConfig,
    pub eval: EvalConfig,
    /// Also evaluate the frozen base model and store it next to the method's metrics.
    pub evaluate_baseline: bool,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Piu,
            world: WorldConfig::default(),
            schedule: ScheduleSpec::default(),
            base: TrainConfig::default(),
            unlearn: UnlearnConfig::default(),
            siss: SissConfig::default(),
            uce: UceConfig::default(),
            wid: WidConfig::default(),
            eval: EvalConfig::default(),
            evaluate_baseline: true,
            out_dir: None,
        }
    }
}

/// Mixes the master seed with a component index (splitmix64 finalizer).
pub fn derive_seed(master: u64, component: u64) -> u64 {
    let mut z = master.wrapping_add(component.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    /// Copies the derived component seeds into every block so the stored config
    /// is self-contained.
    pub fn with_derived_seeds(mut self) -> Self {
        let s = self.seed;
        self.base.seed = derive_seed(s, 2);
        self.base.denoiser.init_seed = derive_seed(s, 3);
        self.unlearn.seed = derive_seed(s, 4);
        self.unlearn.probe.seed = derive_seed(s, 5);
        self.siss.seed = derive_seed(s, 4);
        self.eval.seed = derive_seed(s, 6);
        self.eval.probe.seed = derive_seed(s, 5);
        self
    }

    fn generator(&self, forget_identity: usize) -> GeneratorSpec {
        GeneratorSpec {
            num_identities: self.world.num_identities,
            samples_per_identity: self.world.samples_per_identity,
            spread: self.world.spread,
            dim: self.world.identity_dim,
            seed: derive_seed(self.seed, 0),
            forget_identity,
            ratios: self.world.ratios,
        }
    }

    fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            identity_dim: self.world.identity_dim,
            style_dim: self.world.style_dim,
            observation_dim: self.world.observation_dim,
            style_scale: self.world.style_scale,
            seed: derive_seed(self.seed, 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: PiuError| HarnessError::Config(e.to_string());
        self.unlearn.validate().map_err(cfg_err)?;
        if self.eval.n_samples == 0 {
            return Err(HarnessError::Config(
                "eval.n_samples must be at least 1".into(),
            ));
        }
        if self.world.num_identities < 2 {
            return Err(HarnessError::Config(
                "world.num_identities must be at least 2".into(),
            ));
        }
        if self.unlearn.surgical_top_k > self.base.denoiser.blocks {
            return Err(HarnessError::Config(
                "unlearn.surgical_top_k exceeds the number of blocks".into(),
            ));
        }
        Ok(())
    }
}

/// Parses a JSON config, filling defaults. Unknown keys are rejected.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_str(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// World, dataset and schedule of an experiment, with the forget identity resolved.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: ExperimentConfig,
    pub dataset: IdentityDataset,
    pub world: SynthWorld,
    pub schedule: NoiseSchedule,
    pub forget_identity: usize,
}

impl Setup {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut config = config.clone().with_derived_seeds();
        let schedule = config.schedule.build().map_err(stage("schedule"))?;
        let world = SynthWorld::generate(&config.world_spec()).map_err(stage("world"))?;
        let probe_ds = generate_identities(&config.generator(0)).map_err(stage("dataset"))?;
        let forget_identity = match config.world.forget_identity {
            Some(f) => f,
            None => probe_ds
                .identities()
                .find(|&f| anchor_candidates(&probe_ds, &anchor_query(&config.unlearn, f)).is_ok())
                .ok_or_else(|| HarnessError::Config("no identity has an anchor within tolerance; widen unlearn.anchor_tolerance".into()))?,
        };
        if forget_identity >= config.world.num_identities {
            return Err(HarnessError::Config(format!(
                "forget identity {forget_identity} out of range"
            )));
        }
        config.world.forget_identity = Some(forget_identity);
        let dataset =
            generate_identities(&config.generator(forget_identity)).map_err(stage("dataset"))?;
        Ok(Self {
            config,
            dataset,
            world,
            schedule,
            forget_identity,
        })
    }

    /// Content hash of everything the base model depends on.
    pub fn base_key(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            seed: u64,
            world: &'a WorldConfig,
            schedule: &'a ScheduleSpec,
            base: &'a TrainConfig,
        }
        let world = WorldConfig {
            forget_identity: None,
            ..self.config.world.clone()
        };
        let key = Key {
            seed: self.config.seed,
            world: &world,
            schedule: &self.config.schedule,
            base: &self.config.base,
        };
        let json = serde_json::to_vec(&key).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Trains the base model or loads it from `$PIU_CACHE_DIR/<key>.ckpt`.
    pub fn base_model(&self) -> Result<DenoiserParams> {
        let cache = std::env::var_os(CACHE_ENV).map(PathBuf::from);
        let cached = cache
            .as_ref()
            .map(|dir| dir.join(format!("{}.ckpt", self.base_key())));
        if let Some(path) = &cached {
            if let Ok(bytes) = fs::read(path) {
                return checkpoint::from_bytes(&bytes).map_err(stage("load cached base model"));
            }
        }
        let trained = train_base(
            &self.dataset,
            &self.world,
            &self.schedule,
            &self.config.base,
        )
        .map_err(stage("train-base"))?;
        if let (Some(dir), Some(path)) = (&cache, &cached) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            // write then rename so concurrent runs never read a partial file
            let tmp = path.with_extension(format!("tmp{}", std::process::id()));
            fs::write(&tmp, checkpoint::to_bytes(&trained.params)).map_err(io_err(&tmp))?;
            fs::rename(&tmp, path).map_err(io_err(path))?;
        }
        Ok(trained.params)
    }

    pub fn layer_scores(&self, params: &DenoiserParams) -> Result<Vec<LayerScore>> {
        let probe = SeparationProbe::from_dataset(
            &self.dataset,
            &self.schedule,
            params.dims().latent_dim,
            &self.config.unlearn.probe,
        )
        .map_err(stage("analyze-layers"))?;
        layer_separation(params, &probe).map_err(stage("analyze-layers"))
    }

    pub fn anchor(&self) -> Result<usize> {
        select_anchor(
            &self.dataset,
            &anchor_query(&self.config.unlearn, self.forget_identity),
        )
        .map_err(stage("select-anchor"))
    }

    /// Every `(identity, similarity)` inside the anchor tolerance band.
    pub fn anchor_candidates(&self) -> Result<Vec<(usize, f64)>> {
        anchor_candidates(
            &self.dataset,
            &anchor_query(&self.config.unlearn, self.forget_identity),
        )
        .map_err(stage("select-anchor"))
    }

    pub fn evaluate(&self, params: &DenoiserParams) -> Result<MetricsReport> {
        evaluate(
            params,
            &self.dataset,
            &self.world,
            &self.schedule,
            self.forget_identity,
            &self.config.eval,
        )
        .map_err(stage("evaluate"))
    }

    /// Applies the configured method to a copy of `frozen`.
    pub fn unlearn(&self, frozen: &DenoiserParams) -> Result<MethodOutcome> {
        let cfg = &self.config;
        let f = self.forget_identity;
        let (params, log, anchor, mask) = match cfg.method {
            Method::Piu | Method::Naive => {
                let ucfg = if cfg.method == Method::Naive {
                    UnlearnConfig {
                        eta: 0.0,
                        lambda_preserve: 0.0,
                        ..cfg.unlearn
                    }
                } else {
                    cfg.unlearn
                };
                let run = run_unlearning(frozen, &self.dataset, f, &ucfg, &self.schedule)
                    .map_err(stage("unlearn"))?;
                (run.params, run.log, Some(run.plan.anchor), run.plan.mask)
            }
            Method::Wid => {
                let run = run_wid(
                    frozen,
                    &self.dataset,
                    f,
                    &cfg.wid,
                    &cfg.unlearn,
                    &self.schedule,
                    &self.world,
                )
                .map_err(stage("unlearn"))?;
                (run.params, run.log, Some(run.plan.anchor), run.plan.mask)
            }
            Method::Siss => {
                let (params, log) = run_siss(
                    frozen,
                    &self.dataset,
                    f,
                    &cfg.siss,
                    &self.schedule,
                    &self.world,
                )
                .map_err(stage("unlearn"))?;
                let all = frozen.block_tags();
                let mask = SurgicalMask::for_blocks(&all);
                (params, log, None, mask)
            }
            Method::Uce => {
                let anchor = self.anchor()?;
                let blocks = if cfg.uce.surgical_only {
                    surgical_mask_from_scores(
                        frozen,
                        &self.layer_scores(frozen)?,
                        cfg.unlearn.surgical_top_k,
                    )
                    .map_err(stage("analyze-layers"))?
                    .blocks()
                } else {
                    frozen.block_tags()
                };
                let params = run_uce(frozen, &self.dataset, f, anchor, &blocks, &cfg.uce)
                    .map_err(stage("unlearn"))?;
                let mask = SurgicalMask::for_blocks(&blocks);
                (params, TrainingLog::default(), Some(anchor), mask)
            }
        };
        let changed: usize = params
            .mats()
            .iter()
            .zip(frozen.mats())
            .filter(|(a, b)| a != b)
            .map(|(a, _)| a.len())
            .sum();
        Ok(MethodOutcome {
            changed_fraction: changed as f64 / frozen.param_count() as f64,
            params,
            log,
            anchor,
            mask_blocks: mask.blocks(),
        })
    }
}

fn anchor_query(cfg: &UnlearnConfig, forget_identity: usize) -> AnchorQuery {
    AnchorQuery {
        tau: cfg.tau,
        tolerance: cfg.anchor_tolerance,
        forget_identity,
        rng_seed: cfg.seed,
    }
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub params: DenoiserParams,
    pub log: TrainingLog,
    pub anchor: Option<usize>,
    pub mask_blocks: Vec<String>,
    /// Fraction of scalar parameters whose matrix differs from the frozen model.
    pub changed_fraction: f64,
}

/// Summary written to `summary.json` in a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub forget_identity: usize,
    pub anchor: Option<usize>,
    pub trained_blocks: Vec<String>,
    pub changed_fraction: f64,
    pub metrics: MetricsReport,
    pub baseline: Option<MetricsReport>,
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

fn resolve_out(config: &ExperimentConfig, out: Option<&Path>) -> Result<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| config.out_dir.clone())
        .ok_or_else(|| {
            HarnessError::Config("no output directory: pass --out or set out_dir".into())
        })
}

/// Runs the full pipeline and writes `config.json`, `model.ckpt`, `train.log`,
/// `metrics.json`, `layers.json` and `summary.json` into the run directory.
pub fn run_pipeline(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunSummary> {
    let dir = resolve_out(config, out)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let setup = Setup::new(config)?;
    write_file(&dir.join("config.json"), to_json(&setup.config))?;
    let frozen = setup.base_model()?;
    let scores = setup.layer_scores(&frozen)?;
    write_file(&dir.join("layers.json"), to_json(&scores))?;
    let outcome = setup.unlearn(&frozen)?;
    write_file(
        &dir.join("model.ckpt"),
        checkpoint::to_bytes(&outcome.params),
    )?;
    write_file(&dir.join("train.log"), outcome.log.to_text())?;
    let metrics = setup.evaluate(&outcome.params)?;
    write_file(&dir.join("metrics.json"), to_json(&metrics))?;
    let baseline = if setup.config.evaluate_baseline {
        let b = setup.evaluate(&frozen)?;
        write_file(&dir.join("baseline_metrics.json"), to_json(&b))?;
        Some(b)
    } else {
        None
    };
    let summary = RunSummary {
        method: setup.config.method,
        seed: setup.config.seed,
        forget_identity: setup.forget_identity,
        anchor: outcome.anchor,
        trained_blocks: outcome.mask_blocks,
        changed_fraction: outcome.changed_fraction,
        metrics,
        baseline,
    };
    write_file(&dir.join("summary.json"), to_json(&summary))?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    LambdaPreserve,
    Eta,
    Tau,
    SurgicalTopK,
    Method,
}

impl SweepParam {
    fn key(self) -> &'static str {
        match self {
            SweepParam::LambdaPreserve => "lambda_preserve",
            SweepParam::Eta => "eta",
            SweepParam::Tau => "tau",
            SweepParam::SurgicalTopK => "surgical_top_k",
            SweepParam::Method => "method",
        }
    }

    /// The base config with this parameter set to `value`.
    pub fn apply(
        self,
        base: &ExperimentConfig,
        value: &serde_json::Value,
    ) -> Result<ExperimentConfig> {
        let bad = || HarnessError::Config(format!("invalid value {value} for {}", self.key()));
        let mut cfg = base.clone();
        match self {
            SweepParam::LambdaPreserve => {
                cfg.unlearn.lambda_preserve = value.as_f64().ok_or_else(bad)?
            }
            SweepParam::Eta => cfg.unlearn.eta = value.as_f64().ok_or_else(bad)?,
            SweepParam::Tau => cfg.unlearn.tau = value.as_f64().ok_or_else(bad)?,
            SweepParam::SurgicalTopK => {
                cfg.unlearn.surgical_top_k = value.as_u64().ok_or_else(bad)? as usize
            }
            SweepParam::Method => cfg.method = value.as_str().ok_or_else(bad)?.parse()?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<serde_json::Value>,
    #[serde(default)]
    pub base: ExperimentConfig,
}

pub fn parse_sweep_str(text: &str) -> Result<SweepSpec> {
    let spec: SweepSpec =
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    if spec.values.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one value".into(),
        ));
    }
    spec.base.validate()?;
    Ok(spec)
}

pub fn parse_sweep(path: &Path) -> Result<SweepSpec> {
    parse_sweep_str(&fs::read_to_string(path).map_err(io_err(path))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: serde_json::Value,
    pub ism_forget: f64,
    pub ism_retain: f64,
    pub srk: f64,
    pub mmd2_forget: f64,
    pub mmd2_retain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepFailure {
    pub value: serde_json::Value,
    pub status: i32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub parameter: SweepParam,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

impl SweepReport {
    /// Error carrying the status of the first failed run, if any run failed.
    pub fn failure(&self) -> Option<HarnessError> {
        let first = self.failures.first()?;
        Some(HarnessError::SweepFailed {
            failed: self.failures.len(),
            total: self.failures.len() + self.rows.len(),
            status: first.status,
        })
    }
}

fn value_order(a: &serde_json::Value, b: &serde_json::Value) -> std::cmp::Ordering {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        _ => a.to_string().cmp(&b.to_string()),
    }
}

/// Flat whitespace-separated table, one row per successful value.
pub fn sweep_table(report: &SweepReport) -> String {
    let mut s = format!(
        "# {:<14} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        report.parameter.key(),
        "ism_forget",
        "ism_retain",
        "srk",
        "mmd2_forget",
        "mmd2_retain"
    );
    for r in &report.rows {
        let v = match &r.value {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let _ = writeln!(
            s,
            "{v:<16} {:>12.6} {:>12.6} {:>12.4} {:>12.6} {:>12.6}",
            r.ism_forget, r.ism_retain, r.srk, r.mmd2_forget, r.mmd2_retain
        );
    }
    s
}

/// Runs one pipeline per value under `out/run_<i>` and writes `sweep.json` and
/// `sweep.txt`. Failed runs are reported and excluded from the table.
pub fn run_sweep(spec: &SweepSpec, out: &Path) -> Result<SweepReport> {
    if spec.values.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one value".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, value) in spec.values.iter().enumerate() {
        let run = spec
            .parameter
            .apply(&spec.base, value)
            .and_then(|cfg| run_pipeline(&cfg, Some(&out.join(format!("run_{i}")))));
        match run {
            Ok(s) => rows.push(SweepRow {
                value: value.clone(),
                ism_forget: s.metrics.ism_forget,
                ism_retain: s.metrics.ism_retain,
                srk: s.metrics.srk,
                mmd2_forget: s.metrics.mmd2_forget,
                mmd2_retain: s.metrics.mmd2_retain,
            }),
            Err(e) => failures.push(SweepFailure {
                value: value.clone(),
                status: e.exit_code(),
                error: e.to_string(),
            }),
        }
    }
    rows.sort_by(|a, b| value_order(&a.value, &b.value));
    let report = SweepReport {
        parameter: spec.parameter,
        rows,
        failures,
    };
    write_file(&out.join("sweep.json"), to_json(&report))?;
    write_file(&out.join("sweep.txt"), sweep_table(&report))?;
    Ok(report)
}
