//! `ea`: synthetic MIMO sounding, channel-feature datasets, CNN training,
//! and evaluation, behind one deterministic command-line surface.

mod ops;
mod verify;

use clap::{Parser, Subcommand};
use ea_core::config::ExperimentConfig;
use ops::{ArchChoice, CliError};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ea",
    version,
    about = "Emitter association by channel fingerprinting: generate, train, evaluate, verify"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// `--snr-db 20` or `--snr-db none` (noise off).
#[derive(Clone, Copy, Debug)]
struct SnrOverride(Option<f64>);

fn parse_snr(s: &str) -> Result<SnrOverride, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(SnrOverride(None));
    }
    s.parse::<f64>()
        .map(|v| SnrOverride(Some(v)))
        .map_err(|_| format!("expected a number or \"none\", got {s:?}"))
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the dataset and manifest into an existing directory.
    Generate {
        /// Experiment config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the root seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the receiver noise level; a number or "none".
        #[arg(long, value_parser = parse_snr)]
        snr_db: Option<SnrOverride>,
        /// Directory that receives dataset.eacf and manifest.toml.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one architecture on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset file written by `generate`.
        #[arg(long)]
        dataset: PathBuf,
        /// Which architecture to train.
        #[arg(long, value_enum)]
        arch: ArchChoice,
        /// Output model file; the training curve lands next to it as
        /// <stem>.history.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on the held-out split.
    Eval {
        /// Model file written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Optional existing directory for confusion.csv and summary.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast invariant suite; one PASS/FAIL line per check.
    Verify {
        #[arg(long, hide = true)]
        fault_conv_backward_sign: bool,
    },
    /// Full pipeline: generate, train both architectures, evaluate both.
    E2e {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_snr)]
        snr_db: Option<SnrOverride>,
        /// Output directory (created if missing); default "e2e-out".
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(
    path: Option<&Path>,
    seed: Option<u64>,
    snr: Option<SnrOverride>,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(SnrOverride(v)) = snr {
        cfg.snr_db = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `Ok(false)` means "ran fine but checks failed" (exit 1).
fn run(cli: Cli) -> Result<bool, CliError> {
    match cli.cmd {
        Cmd::Generate { config, seed, snr_db, out } => {
            let cfg = load_config(config.as_deref(), seed, snr_db)?;
            ops::cmd_generate(&cfg, &out)?;
            Ok(true)
        }
        Cmd::Train { config, seed, dataset, arch, out } => {
            let cfg = load_config(config.as_deref(), seed, None)?;
            ops::cmd_train(&cfg, &dataset, arch, &out)?;
            Ok(true)
        }
        Cmd::Eval { model, dataset, out } => {
            ops::cmd_eval(&model, &dataset, out.as_deref())?;
            Ok(true)
        }
        Cmd::Verify { fault_conv_backward_sign } => {
            let fault = verify::FaultInjection { conv_backward_sign: fault_conv_backward_sign };
            Ok(verify::run_suite(&fault))
        }
        Cmd::E2e { config, seed, snr_db, out } => {
            let cfg = load_config(config.as_deref(), seed, snr_db)?;
            let out = out.unwrap_or_else(|| PathBuf::from("e2e-out"));
            ops::cmd_e2e(&cfg, &out)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
