use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use piu_core::diffusion::checkpoint;
use piu_harness::{
    parse_config, parse_sweep, run_pipeline, run_sweep, sweep_table, to_json, write_file,
    ExperimentConfig, HarnessError, Method, Result, Setup,
};

#[derive(Parser)]
#[command(
    name = "piu",
    version,
    about = "Identity unlearning experiments on a synthetic diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load from cache) the base model.
    TrainBase(Common),
    /// Score every conditioning block for identity separation.
    AnalyzeLayers(Common),
    /// Pick the anchor identity for the forget identity.
    SelectAnchor(Common),
    /// Apply the configured unlearning method to the base model.
    Unlearn(Common),
    /// Evaluate a checkpoint (default: `<out>/model.ckpt`, else the base model).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run every stage and write a complete run directory.
    Pipeline(Common),
    /// Run one pipeline per value of a swept parameter.
    Sweep {
        /// Sweep spec JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        self.out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .ok_or_else(|| {
                HarnessError::Config("no output directory: pass --out or set out_dir".into())
            })
    }
}

#[derive(Serialize)]
struct Candidate {
    identity: usize,
    similarity: f64,
}

#[derive(Serialize)]
struct AnchorReport {
    forget_identity: usize,
    anchor: usize,
    candidates: Vec<Candidate>,
    tau: f64,
    tolerance: f64,
}

fn read_checkpoint(path: &Path) -> Result<piu_core::diffusion::DenoiserParams> {
    let bytes = std::fs::read(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    checkpoint::from_bytes(&bytes).map_err(|source| HarnessError::Runtime {
        stage: "load checkpoint",
        source,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainBase(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg)?;
            let setup = Setup::new(&cfg)?;
            let base = setup.base_model()?;
            write_file(&out.join("config.json"), to_json(&setup.config))?;
            write_file(&out.join("base.ckpt"), checkpoint::to_bytes(&base))?;
            println!(
                "base model: {} parameters, key {}",
                base.param_count(),
                setup.base_key()
            );
        }
        Command::AnalyzeLayers(c) => {
            let cfg = c.load()?;
            let setup = Setup::new(&cfg)?;
            let scores = setup.layer_scores(&setup.base_model()?)?;
            if let Some(out) = c.out.as_ref().or(cfg.out_dir.as_ref()) {
                write_file(&out.join("layers.json"), to_json(&scores))?;
            }
            println!(
                "{:<6} {:>12} {:>12} {:>12}",
                "block", "s_kv", "s_q", "combined"
            );
            for s in &scores {
                println!(
                    "{:<6} {:>12.6} {:>12.6} {:>12.6}",
                    s.tag,
                    s.s_kv,
                    s.s_q,
                    s.combined()
                );
            }
        }
        Command::SelectAnchor(c) => {
            let cfg = c.load()?;
            let setup = Setup::new(&cfg)?;
            let anchor = setup.anchor()?;
            let u = &setup.config.unlearn;
            let candidates = setup
                .anchor_candidates()?
                .into_iter()
                .map(|(identity, similarity)| Candidate {
                    identity,
                    similarity,
                })
                .collect();
            let report = AnchorReport {
                forget_identity: setup.forget_identity,
                anchor,
                candidates,
                tau: u.tau,
                tolerance: u.anchor_tolerance,
            };
            let json = to_json(&report);
            if let Some(out) = c.out.as_ref().or(cfg.out_dir.as_ref()) {
                write_file(&out.join("anchor.json"), &json)?;
            }
            print!("{json}");
        }
        Command::Unlearn(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg)?;
            let setup = Setup::new(&cfg)?;
            let outcome = setup.unlearn(&setup.base_model()?)?;
            write_file(&out.join("config.json"), to_json(&setup.config))?;
            write_file(
                &out.join("model.ckpt"),
                checkpoint::to_bytes(&outcome.params),
            )?;
            write_file(&out.join("train.log"), outcome.log.to_text())?;
            println!(
                "{}: trained blocks {:?}, changed fraction {:.4}",
                setup.config.method.as_str(),
                outcome.mask_blocks,
                outcome.changed_fraction
            );
        }
        Command::Evaluate { common: c, model } => {
            let cfg = c.load()?;
            let setup = Setup::new(&cfg)?;
            let out = c.out.clone().or_else(|| cfg.out_dir.clone());
            let model = model.or_else(|| {
                out.as_ref()
                    .map(|o| o.join("model.ckpt"))
                    .filter(|p| p.exists())
            });
            let params = match &model {
                Some(p) => read_checkpoint(p)?,
                None => setup.base_model()?,
            };
            let report = setup.evaluate(&params)?;
            let json = to_json(&report);
            if let Some(out) = &out {
                write_file(&out.join("metrics.json"), &json)?;
            }
            print!("{json}");
        }
        Command::Pipeline(c) => {
            let cfg = c.load()?;
            let out = c.out_dir(&cfg)?;
            let s = run_pipeline(&cfg, Some(&out))?;
            let m = &s.metrics;
            println!(
                "{} forget={} anchor={:?} ism_forget={:.4} ism_retain={:.4} srk={:.3} mmd2_forget={:.5} mmd2_retain={:.5}",
                s.method.as_str(),
                s.forget_identity,
                s.anchor,
                m.ism_forget,
                m.ism_retain,
                m.srk,
                m.mmd2_forget,
                m.mmd2_retain
            );
        }
        Command::Sweep { config, out } => {
            let spec = parse_sweep(&config)?;
            let report = run_sweep(&spec, &out)?;
            print!("{}", sweep_table(&report));
            for f in &report.failures {
                eprintln!(
                    "run with value {} failed (status {}): {}",
                    f.value, f.status, f.error
                );
            }
            if let Some(e) = report.failure() {
                return Err(e);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
