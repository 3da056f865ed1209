//! `vsd`: train and evaluate Bayesian neural networks with structured
//! multiplicative dropout posteriors.
//!
//! Subcommands: `train`, `eval`, `ood`, `diagnose`, `verify`. Each takes a
//! TOML experiment config; train flags override file values (flag > env >
//! file > default, where `VSD_OUTPUT_ROOT` overrides the output directory).
//! Exit codes: 0 success, 2 config error, 3 data error, 4 divergence,
//! 1 otherwise.

mod checkpoint;
mod commands;
mod config;
mod data;
mod fail;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Overrides};
use crate::fail::Fail;

#[derive(Parser)]
#[command(
    name = "vsd",
    version,
    about = "Structured-dropout variational Bayesian neural networks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to load (default: <output_dir>/<name>/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// MC samples for prediction (default: train.eval_samples).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint + trace into the run directory.
    Train {
        /// Experiment TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Continue from the run's checkpoint if present.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// KL weight λ.
        #[arg(long)]
        kl_weight: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// MC samples per training objective evaluation.
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Run name (output subdirectory).
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one dataset split; writes metrics JSON and a
    /// predictions CSV.
    Eval {
        #[command(flatten)]
        common: ConfigArg,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score out-of-distribution detection of [data] test vs [ood_data] test.
    Ood {
        #[command(flatten)]
        common: ConfigArg,
    },
    /// Spectral norms, stable ranks, and the curvature-noise regularizer.
    Diagnose {
        #[command(flatten)]
        common: ConfigArg,
        /// Probe layer index (default: first structured dense layer).
        #[arg(long)]
        layer: Option<usize>,
        /// Antithetic MC pairs for the regularizer estimate.
        #[arg(long, default_value_t = 2000)]
        pairs: usize,
    },
    /// Run the built-in oracle suite (KL vs MC, gradients, orthogonality, ...).
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn load_resolved(path: &PathBuf, ov: &Overrides) -> Result<ExperimentConfig, Fail> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.resolve(ov)?;
    Ok(cfg)
}

fn run() -> Result<(), Fail> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            resume,
            seed,
            epochs,
            lr,
            kl_weight,
            batch_size,
            mc_samples,
            name,
            output_dir,
        } => {
            let ov = Overrides {
                seed,
                epochs,
                lr,
                kl_weight,
                batch_size,
                mc_samples,
                name,
                output_dir,
            };
            let cfg = load_resolved(&config, &ov)?;
            commands::cmd_train(&cfg, resume)
        }
        Cmd::Eval { common, split } => {
            let cfg = load_resolved(&common.config, &Overrides::default())?;
            commands::cmd_eval(&cfg, &common.checkpoint, &split, common.samples)
        }
        Cmd::Ood { common } => {
            let cfg = load_resolved(&common.config, &Overrides::default())?;
            commands::cmd_ood(&cfg, &common.checkpoint, common.samples)
        }
        Cmd::Diagnose {
            common,
            layer,
            pairs,
        } => {
            let cfg = load_resolved(&common.config, &Overrides::default())?;
            commands::cmd_diagnose(&cfg, &common.checkpoint, layer, pairs)
        }
        Cmd::Verify { seed } => commands::cmd_verify(seed),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
