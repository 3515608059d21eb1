use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std4d::harness::config::{RunConfig, StageSelect};
use std4d::harness::gradcheck::gradient_suite;
use std4d::harness::pipeline::{self, EvalTarget};
use std4d::harness::run::RunDir;
use std4d::{Error, Result};

#[derive(Parser)]
#[command(
    name = "std4d",
    version,
    about = "Disentangled 4D latent diffusion at desk scale"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; unset fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any configuration field, e.g. `--set stage2.lambda_o=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// run.id
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// run.root
    #[arg(long, global = true)]
    root: Option<PathBuf>,
    /// run.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the procedural dataset into the run directory.
    Synth,
    /// Train the autoencoder and the multi-view and video teachers.
    PretrainTeachers,
    /// Run one training stage or all four in order.
    Train {
        #[arg(long, value_parser = parse_stage)]
        stage: Option<StageSelect>,
    },
    /// Fit dynamic Gaussians to each scene's reference video.
    Construct {
        #[arg(long)]
        scene: Option<usize>,
        /// Skip the student's prior features in the deformation field.
        #[arg(long)]
        no_priors: bool,
    },
    /// Render stored constructions on a fresh orbit.
    Render {
        #[arg(long)]
        views: Option<usize>,
    },
    /// Score a target against the ground-truth frames.
    Evaluate {
        #[arg(long, value_enum, default_value = "model")]
        target: Target,
        /// Student stage for `--target model`; defaults to the latest.
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        stage: Option<u8>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Gt,
    Model,
    Construct,
}

fn parse_stage(s: &str) -> std::result::Result<StageSelect, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut pairs = Vec::new();
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut raw = |k: &str, v: String| pairs.push((k.to_string(), v));
    if let Some(id) = &common.run_id {
        raw("run.id", format!("{id:?}"));
    }
    if let Some(root) = &common.root {
        raw("run.root", format!("{:?}", root.display().to_string()));
    }
    if let Some(seed) = common.seed {
        raw("run.seed", seed.to_string());
    }
    base.with_overrides(&pairs)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    if let Command::Gradcheck = cli.command {
        let checks = gradient_suite()?;
        let mut failed = 0;
        for c in &checks {
            let tag = if c.passed() { "ok" } else { "FAIL" };
            println!(
                "{tag:4} {:40} {:.3e} < {:.0e}",
                c.name, c.error, c.tolerance
            );
            failed += usize::from(!c.passed());
        }
        if failed > 0 {
            return Err(Error::Numerical(format!("{failed} gradient checks failed")));
        }
        return Ok(json!({ "checks": checks.len() }));
    }
    let mut cfg = config(&cli.common)?;
    let out = match cli.command {
        Command::Synth => {
            let run = RunDir::open(&cfg)?;
            let scenes = pipeline::synth(&cfg, &run)?;
            json!({ "scenes": scenes.len(), "dir": run.path() })
        }
        Command::PretrainTeachers => {
            let run = RunDir::open(&cfg)?;
            serde_json::to_value(pipeline::pretrain_teachers(&cfg, &run)?)?
        }
        Command::Train { stage } => {
            if let Some(s) = stage {
                cfg.run.stage = s;
            }
            let run = RunDir::open(&cfg)?;
            serde_json::to_value(pipeline::train(&cfg, &run)?)?
        }
        Command::Construct { scene, no_priors } => {
            let run = RunDir::open(&cfg)?;
            serde_json::to_value(pipeline::construct(&cfg, &run, scene, !no_priors)?)?
        }
        Command::Render { views } => {
            let run = RunDir::open(&cfg)?;
            json!({ "written": pipeline::render(&cfg, &run, views)? })
        }
        Command::Evaluate { target, stage } => {
            let target = match (target, stage) {
                (Target::Gt, _) => EvalTarget::GroundTruth,
                (Target::Model, s) => EvalTarget::Model(s),
                (Target::Construct, _) => EvalTarget::Construct,
            };
            let run = RunDir::open(&cfg)?;
            serde_json::to_value(pipeline::evaluate(&cfg, &run, target)?)?
        }
        Command::Gradcheck => unreachable!("handled above"),
    };
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(v) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&v).expect("report serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
