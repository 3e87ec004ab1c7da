mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use densevit::data::Dataset;
use densevit::suite::DEFAULT_TOLERANCE;

use crate::config::RunConfig;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Density-aware rotated-target detector.
#[derive(Debug, Parser)]
#[command(name = "densevit", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (images, annotations, manifest).
    Synth {
        #[arg(long)]
        count: Option<u64>,
    },
    /// Write density heatmaps and token masks for a dataset.
    Mask {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train a model and write its log and checkpoint.
    Train {
        /// Dataset to train on; synthesized in memory when absent.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Evaluate a checkpoint and print metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
    },
    /// Detect targets and print one line per box.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "images", required_unless_present = "images")]
        manifest: Option<PathBuf>,
        /// PGM images to run on.
        #[arg(long, num_args = 1..)]
        images: Vec<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients module by module.
    Gradcheck {
        /// Perturb every analytic gradient; the check must then fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

enum Failure {
    Data(densevit::Error),
    Numeric(String),
}

impl From<densevit::Error> for Failure {
    fn from(e: densevit::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Data(e)
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.into())
    }
}

fn run_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn write_json(dir: Option<&PathBuf>, name: &str, value: &impl serde::Serialize) -> Result<(), Failure> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join(name),
            serde_json::to_string_pretty(value).map_err(densevit::Error::from)? + "\n",
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match cli.command {
        Command::Synth { count } => {
            let mut cfg = run_config(common)?;
            if let Some(n) = count {
                cfg.data.count = n;
            }
            commands::synth(&cfg)?;
        }
        Command::Mask { manifest } => commands::mask(&run_config(common)?, &manifest)?,
        Command::Train { manifest, iters } => {
            let mut cfg = run_config(common)?;
            if let Some(n) = iters {
                cfg.train.iters = n;
            }
            commands::train_cmd(&cfg, manifest.as_deref())?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            split,
        } => {
            let explicit = common.config.is_some().then(|| run_config(common)).transpose()?;
            let (model, cfg) = commands::load_checkpoint(&checkpoint, explicit.as_ref())?;
            let metrics = commands::eval(&model, &cfg, manifest.as_deref(), &split)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&metrics).map_err(densevit::Error::from)?
            );
            write_json(common.out.as_ref(), "metrics.json", &metrics)?;
        }
        Command::Infer {
            checkpoint,
            manifest,
            images,
        } => {
            let explicit = common.config.is_some().then(|| run_config(common)).transpose()?;
            let (model, cfg) = commands::load_checkpoint(&checkpoint, explicit.as_ref())?;
            let scenes = match manifest {
                Some(m) => Dataset::load(m)?.scenes,
                None => commands::images_as_scenes(&images)?,
            };
            let lines = commands::infer(&model, &cfg, &scenes)?;
            let mut stdout = std::io::stdout().lock();
            // a closed pipe downstream is not an error
            for l in &lines {
                if writeln!(stdout, "{l}").is_err() {
                    break;
                }
            }
            if let Some(dir) = &common.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(
                    dir.join("detections.txt"),
                    lines.iter().map(|l| format!("{l}\n")).collect::<String>(),
                )?;
            }
        }
        Command::Gradcheck { corrupt } => {
            let checks = commands::gradcheck(common.seed.unwrap_or(0), corrupt)?;
            commands::print_gradcheck(&checks);
            write_json(common.out.as_ref(), "gradcheck.json", &checks)?;
            let failed: Vec<&str> = checks
                .iter()
                .filter(|c| !c.passed(DEFAULT_TOLERANCE))
                .map(|c| c.module.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(Failure::Numeric(format!(
                    "gradient check above {DEFAULT_TOLERANCE:e} in {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}
