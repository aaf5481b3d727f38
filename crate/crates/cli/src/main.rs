mod plot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use flexitok::config::{Dtype, RunConfig, DETERMINISTIC_ENV};
use flexitok::metrics::{MetricReport, CSV_HEADER};
use flexitok::pipeline::{self, learning_curves, CURVE_HEADER};
use flexitok::run::{read_metrics, METRICS_FILE};
use flexitok::training::{FreezeStrategy, Stage, TokeniserInit};
use flexitok::Error;
use serde_json::json;

#[derive(Parser)]
#[command(name = "flexitok", version, about = "Flexible-compression tokeniser and emulator for physics fields")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(clap::Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Run root; stages write to `<out>/pretrain` and `<out>/rollout`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// `full` or `mostly-frozen`.
    #[arg(long)]
    freeze: Option<FreezeStrategy>,
    /// `fresh` or a pretraining checkpoint.
    #[arg(long)]
    tokeniser_init: Option<TokeniserInit>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Writes the synthetic sources of a config as archives.
    GenData {
        config: PathBuf,
        /// Defaults to `<out>/data`.
        #[arg(long)]
        dir: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Tokeniser reconstruction training.
    Pretrain {
        config: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Next-frame training of the full emulator.
    RolloutTrain {
        config: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Metrics of a checkpoint on the validation data, or of two archives.
    Eval {
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "pred")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "target", conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
        #[command(flatten)]
        o: Overrides,
    },
    /// Autoregressive rollout VRMSE by horizon bucket.
    RolloutEval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        o: Overrides,
    },
    /// Learning curves of a stage directory as CSV and PNG.
    Report {
        run_dir: PathBuf,
        /// Defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path, o: &Overrides, stage: Option<Stage>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(out) = &o.out {
        cfg.out = out.clone();
    }
    if std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0") {
        cfg.deterministic = true;
    }
    let tc = match stage {
        Some(Stage::Pretrain) => Some(&mut cfg.pretrain),
        Some(Stage::Rollout) => Some(&mut cfg.rollout),
        None => None,
    };
    if let Some(tc) = tc {
        if let Some(n) = o.steps {
            tc.steps = n;
        }
        if let Some(f) = o.freeze {
            tc.freeze = f;
        }
        if let Some(init) = &o.tokeniser_init {
            tc.tokeniser_init = init.clone();
        }
    }
    Ok(cfg)
}

fn stage_dir(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.out.join(stage.to_string())
}

fn train(cfg: &RunConfig, stage: Stage) -> Result<()> {
    let dir = stage_dir(cfg, stage);
    let out = match cfg.dtype {
        Dtype::F32 => pipeline::train_stage::<f32>(cfg, stage, &dir)?,
        Dtype::F64 => pipeline::train_stage::<f64>(cfg, stage, &dir)?,
    };
    let last = out.summary.val.last();
    let rec = json!({
        "stage": stage.to_string(),
        "run_dir": out.run_dir,
        "final_checkpoint": out.final_checkpoint,
        "resumed_from": out.resumed_from,
        "steps": out.summary.train.last().map(|s| s.step),
        "val_loss": last.map(|v| v.loss),
        "val_vrmse": last.and_then(|v| v.report.vrmse),
    });
    println!("{rec}");
    Ok(())
}

fn emit_report(report: &MetricReport, step: usize, format: Format) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match format {
        Format::Json => writeln!(out, "{}", serde_json::to_string_pretty(report)?)?,
        Format::Csv => {
            writeln!(out, "{CSV_HEADER}")?;
            for r in report.csv_rows(step, "eval") {
                writeln!(out, "{}", r.to_line())?;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::GenData { config, dir, o } => {
            let cfg = load_config(&config, &o, None)?;
            let dir = dir.unwrap_or_else(|| cfg.out.join("data"));
            for p in pipeline::gen_data(&cfg, &dir)? {
                println!("{}", p.display());
            }
        }
        Command::Pretrain { config, o } => train(&load_config(&config, &o, Some(Stage::Pretrain))?, Stage::Pretrain)?,
        Command::RolloutTrain { config, o } => train(&load_config(&config, &o, Some(Stage::Rollout))?, Stage::Rollout)?,
        Command::Eval { config, checkpoint, pred, target, format, o } => match (pred, target, checkpoint) {
            (Some(p), Some(t), _) => emit_report(&pipeline::eval_archives(&p, &t)?, 0, format)?,
            (_, _, Some(ck)) => {
                let Some(config) = config else { bail!(Error::Config("eval --checkpoint needs a config file".into())) };
                let cfg = load_config(&config, &o, None)?;
                let (report, step) = match cfg.dtype {
                    Dtype::F32 => (pipeline::eval_checkpoint::<f32>(&cfg, &ck)?, pipeline::load_checkpoint::<f32>(&ck)?.meta.step),
                    Dtype::F64 => (pipeline::eval_checkpoint::<f64>(&cfg, &ck)?, pipeline::load_checkpoint::<f64>(&ck)?.meta.step),
                };
                emit_report(&report, step, format)?;
            }
            _ => bail!(Error::Config("eval needs --checkpoint or --pred with --target".into())),
        },
        Command::RolloutEval { config, checkpoint, json, o } => {
            let cfg = load_config(&config, &o, None)?;
            let reports = match cfg.dtype {
                Dtype::F32 => pipeline::rollout_eval::<f32>(&cfg, &checkpoint)?,
                Dtype::F64 => pipeline::rollout_eval::<f64>(&cfg, &checkpoint)?,
            };
            if json {
                let m: serde_json::Map<_, _> =
                    reports.iter().map(|(n, r)| Ok((n.clone(), serde_json::to_value(r)?))).collect::<Result<_>>()?;
                println!("{}", serde_json::to_string_pretty(&m)?);
            } else {
                for (name, r) in &reports {
                    println!("{name}: {} trajectories ({} rejected)", r.evaluated, r.rejected);
                    for b in &r.buckets {
                        let v = b.vrmse.map_or("n/a".into(), |v| format!("{v:.6}"));
                        println!("  {:<11} vrmse {v}", b.label);
                    }
                }
            }
        }
        Command::Report { run_dir, out } => {
            let metrics = run_dir.join(METRICS_FILE);
            if !metrics.is_file() {
                bail!(Error::Config(format!("{} has no {METRICS_FILE}", run_dir.display())));
            }
            let curves = learning_curves(&read_metrics(&metrics)?);
            let out = out.unwrap_or(run_dir);
            fs::create_dir_all(&out)?;
            let mut csv = format!("{CURVE_HEADER}\n");
            for c in &curves {
                csv.push_str(&c.to_line());
                csv.push('\n');
            }
            let csv_path = out.join("curves.csv");
            fs::write(&csv_path, csv).with_context(|| csv_path.display().to_string())?;
            let png_path = out.join("curves.png");
            plot::render(&curves, &png_path)?;
            println!("{}", json!({ "rows": curves.len(), "csv": csv_path, "png": png_path }));
        }
    }
    Ok(())
}

/// Exit code and kind for the machine-readable error record.
fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::SchemaMismatch { .. }) => (3, "config"),
        Some(Error::MissingCheckpoint { .. }) => (4, "missing_checkpoint"),
        Some(Error::Incompatible(_) | Error::Shape(_)) => (5, "incompatible"),
        Some(Error::Checkpoint(_)) => (6, "checkpoint"),
        Some(Error::Locked { .. }) => (7, "locked"),
        Some(Error::Io(_) | Error::CorruptHeader(_) | Error::TruncatedChunk { .. }) => (8, "io"),
        Some(Error::NonFiniteLoss { .. }) => (9, "non_finite_loss"),
        _ if e.downcast_ref::<std::io::Error>().is_some() => (8, "io"),
        _ => (1, "error"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": "usage", "exit_code": 2, "message": e.to_string().trim() }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("{}", json!({ "error": kind, "exit_code": code, "message": format!("{e:#}") }));
            ExitCode::from(code)
        }
    }
}
