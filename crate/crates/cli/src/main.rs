//! `plc`: runs the pipeline stages over a JSON config.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 runtime error or a
//! failed gradient check.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use plc_core::geom::IGNORE;
use plc_core::learn::gradcheck::{check_caption_loss, finite_diff_check, random_instance};
use plc_core::learn::{supervised_ce_loss, LossKind};
use plc_core::pipeline::{self, PipelineConfig, STAGES};
use plc_core::{exec, Error, Exec};
use serde_json::{json, Value};

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_SCALE: f64 = 10.0;
const GRADCHECK_STEP: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "plc", version, about = "Region-level point-language contrastive pipeline")]
struct Cli {
    /// Pipeline config (JSON). Missing sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config except the embedding seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print machine-readable results to stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Caps worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Runs every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic train and eval scenes.
    Gen,
    /// Simulate every caption source on every train scene.
    Caption,
    /// Associate caption regions with scene points.
    Associate,
    /// Fuse per-source pairs into one training set.
    Fuse,
    /// Embed captions and category prompts.
    Embed,
    /// Train the point encoder.
    Train,
    /// Evaluate the trained model on the eval scenes.
    Eval,
    /// Run every stage in order.
    Pipeline {
        /// Named ablation preset used when no --config is given.
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
    },
    /// Finite-difference check of the analytic loss gradients on a random
    /// instance drawn from --seed (default 0).
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GradLoss::All)]
        loss: GradLoss,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GradLoss {
    Clip,
    Pdc,
    Rpdc,
    Supervised,
    All,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        exec::set_thread_count(n);
    }
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let emit = |v: &Value| {
        if cli.json {
            println!("{v}");
        }
    };
    if let Command::Gradcheck { loss } = cli.command {
        return gradcheck(exec, loss, cli.seed.unwrap_or(0), cli.json, emit);
    }
    let preset = match &cli.command {
        Command::Pipeline { preset } => preset.as_deref(),
        _ => None,
    };
    let cfg = load_config(cli.config.as_deref(), preset, cli.seed)?;
    let stage = match cli.command {
        Command::Gen => "gen",
        Command::Caption => "caption",
        Command::Associate => "associate",
        Command::Fuse => "fuse",
        Command::Embed => "embed",
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Pipeline { .. } => {
            let report = pipeline::run_pipeline(&cfg, exec, |v| eprintln!("{v}"))?;
            eprint!("{}", report.to_table(&cfg.eval.categories));
            emit(&serde_json::to_value(&report).map_err(Error::from)?);
            return Ok(());
        }
        Command::Gradcheck { .. } => unreachable!(),
    };
    let (_, f) = STAGES.iter().find(|(name, _)| *name == stage).expect("stage is registered");
    let summary = f(&cfg, exec)?;
    eprintln!("{summary}");
    emit(&summary);
    Ok(())
}

fn load_config(path: Option<&std::path::Path>, preset: Option<&str>, seed: Option<u64>) -> Result<PipelineConfig, Failure> {
    let mut cfg = match (path, preset) {
        (Some(p), _) => PipelineConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Failure::Config(format!("cannot read {}: {io}", p.display())),
            e => e.into(),
        })?,
        (None, Some(name)) => pipeline::preset(name)?,
        (None, None) => PipelineConfig::default(),
    };
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    cfg.apply_env();
    cfg.validate()?;
    Ok(cfg)
}

fn gradcheck(exec: Exec, which: GradLoss, seed: u64, json: bool, emit: impl Fn(&Value)) -> Result<(), Failure> {
    let inst = random_instance(seed, 64, 8, 16, 10);
    let kinds = [
        (GradLoss::Clip, "clip"),
        (GradLoss::Pdc, "pdc"),
        (GradLoss::Rpdc, "rpdc"),
        (GradLoss::Supervised, "supervised"),
    ];
    let mut results = Vec::new();
    for (kind, name) in kinds {
        if which != GradLoss::All && which != kind {
            continue;
        }
        let r = match kind {
            GradLoss::Supervised => {
                let labels: Vec<u16> = (0..inst.point_features.nrows())
                    .map(|i| if i % 5 == 4 { IGNORE } else { (i % inst.captions.nrows()) as u16 })
                    .collect();
                finite_diff_check(
                    exec,
                    |f| supervised_ce_loss(f, &inst.captions, &labels, GRADCHECK_SCALE),
                    &inst.point_features,
                    GRADCHECK_STEP,
                    seed,
                )?
            }
            _ => {
                let loss: LossKind = name.parse()?;
                check_caption_loss(exec, loss, &inst, GRADCHECK_SCALE, GRADCHECK_STEP)?
            }
        };
        eprintln!(
            "{name:<10} max rel error {:.3e}  max abs error {:.3e}  ({} coords)",
            r.max_rel_error, r.max_abs_error, r.coords_checked
        );
        results.push((name, r));
    }
    let worst = results.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let pass = worst <= GRADCHECK_TOLERANCE;
    if !json {
        println!("max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})");
    }
    emit(&json!({
        "seed": seed,
        "tolerance": GRADCHECK_TOLERANCE,
        "max_rel_error": worst,
        "pass": pass,
        "losses": results.iter().map(|(n, r)| json!({
            "loss": n,
            "max_rel_error": r.max_rel_error,
            "max_abs_error": r.max_abs_error,
            "coords_checked": r.coords_checked,
        })).collect::<Vec<_>>(),
    }));
    if pass {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {worst:.3e} > {GRADCHECK_TOLERANCE:.0e}")))
    }
}
