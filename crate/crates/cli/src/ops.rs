//! Command implementations shared by the argument-parsing front end.
//!
//! Every command is deterministic given (config, seed): reruns produce
//! byte-identical output files. Exit-code contract: 0 success, 1 verification
//! failure, 2 config error, 3 I/O error, 4 data shape/format mismatch.

use ea_core::config::{stage, ConfigError, ExperimentConfig};
use ea_core::dataset::{
    build_dataset, read_dataset, write_dataset, DatasetError, LabeledDataset, SplitTag,
};
use ea_core::models::{
    build_dcnn, build_dcnn_mcm, evaluate_parallel, load_model, save_model, train, EvalReport,
    Model, ModelError, TrainingHistory,
};
use ea_core::sim::{default_plan, sample_mimo_channel, SimError};
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
pub enum CliError {
    /// Unparseable or semantically invalid configuration (exit 2).
    Config(String),
    /// Filesystem failure (exit 3).
    Io(String),
    /// Dataset/model content that does not fit together (exit 4).
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config: {m}"),
            CliError::Io(m) => write!(f, "i/o: {m}"),
            CliError::Data(m) => write!(f, "data: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(m) => CliError::Io(m),
            ConfigError::Parse(m) | ConfigError::Invalid(m) => CliError::Config(m),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(m) => CliError::Io(m.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(m) => CliError::Io(m.to_string()),
            ModelError::BadConfig(m) => CliError::Config(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ArchChoice {
    Dcnn,
    Mcm,
}

impl ArchChoice {
    pub fn name(self) -> &'static str {
        match self {
            ArchChoice::Dcnn => "dcnn",
            ArchChoice::Mcm => "mcm",
        }
    }
}

/// Worker count for evaluation sharding; defaults to 1 so results are
/// bit-reproducible without opting in.
pub fn ea_threads() -> Result<usize, CliError> {
    match std::env::var("EA_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(std::env::VarError::NotUnicode(_)) => {
            Err(CliError::Config("EA_THREADS must be a positive integer".into()))
        }
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Config(format!("EA_THREADS must be a positive integer, got {s:?}"))),
    }
}

#[derive(Serialize)]
struct SplitCounts {
    total: usize,
    per_class: Vec<usize>,
}

/// Generation record written next to the dataset: enough to audit what was
/// built and to detect config drift via the hash.
#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    seed: u64,
    snr_db: String,
    n_examples: usize,
    n_classes: u8,
    n_planes: u16,
    plane_len: u16,
    /// Distinct test ids present in the held-out evaluation split.
    eval_tests: Vec<u16>,
    train: SplitCounts,
    val: SplitCounts,
    eval: SplitCounts,
}

fn split_counts(ds: &LabeledDataset, tag: SplitTag) -> SplitCounts {
    let mut per_class = vec![0usize; ds.n_classes as usize];
    for i in ds.indices(tag) {
        per_class[ds.examples[i].label as usize] += 1;
    }
    SplitCounts { total: per_class.iter().sum(), per_class }
}

fn manifest(cfg: &ExperimentConfig, ds: &LabeledDataset) -> Manifest {
    let mut eval_tests: Vec<u16> =
        ds.indices(SplitTag::Eval).iter().map(|&i| ds.examples[i].test_id).collect();
    eval_tests.sort_unstable();
    eval_tests.dedup();
    Manifest {
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        snr_db: match cfg.snr_db {
            Some(db) => format!("{db}"),
            None => "none".into(),
        },
        n_examples: ds.len(),
        n_classes: ds.n_classes,
        n_planes: ds.n_planes,
        plane_len: ds.plane_len,
        eval_tests,
        train: split_counts(ds, SplitTag::Train),
        val: split_counts(ds, SplitTag::Val),
        eval: split_counts(ds, SplitTag::Eval),
    }
}

fn require_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Io(format!("output directory {} does not exist", dir.display())))
    }
}

/// Build the dataset implied by `cfg` and write `dataset.eacf` plus
/// `manifest.toml` into `out`.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<LabeledDataset, CliError> {
    require_dir(out)?;
    let plan = default_plan(&cfg.bands)?;
    let channel = sample_mimo_channel(cfg.stage_seed(stage::CHANNEL), &cfg.channel)?;
    let ds = build_dataset(&plan, &channel, &cfg.build_config())?;

    let ds_path = out.join("dataset.eacf");
    write_dataset(&ds_path, &ds)?;
    let man = manifest(cfg, &ds);
    let text = toml::to_string(&man).expect("manifest serializes");
    std::fs::write(out.join("manifest.toml"), text)?;

    println!(
        "wrote {} ({} examples: {} train / {} val / {} eval) and manifest.toml",
        ds_path.display(),
        ds.len(),
        ds.split_len(SplitTag::Train),
        ds.split_len(SplitTag::Val),
        ds.split_len(SplitTag::Eval),
    );
    println!("config hash {}", man.config_hash);
    Ok(ds)
}

/// Per-epoch training curve as CSV.
fn history_csv(hist: &TrainingHistory) -> String {
    let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
    for e in &hist.epochs {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
        ));
    }
    out
}

/// `model.ext` -> `model.history.csv`.
pub fn history_path(model_out: &Path) -> PathBuf {
    model_out.with_extension("history.csv")
}

/// Build, train, and persist one architecture; returns the trained model and
/// its history.
pub fn train_on(
    cfg: &ExperimentConfig,
    ds: &LabeledDataset,
    arch: ArchChoice,
    model_out: &Path,
) -> Result<(Model, TrainingHistory), CliError> {
    let mut model = match arch {
        ArchChoice::Dcnn => build_dcnn(&cfg.dcnn, cfg.stage_seed(stage::DCNN_INIT))?,
        ArchChoice::Mcm => build_dcnn_mcm(&cfg.mcm, cfg.stage_seed(stage::MCM_INIT))?,
    };
    let hist = train(&mut model, ds, &cfg.train_config())?;
    save_model(model_out, &model)?;
    std::fs::write(history_path(model_out), history_csv(&hist))?;
    Ok((model, hist))
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    dataset: &Path,
    arch: ArchChoice,
    model_out: &Path,
) -> Result<(), CliError> {
    let ds = read_dataset(dataset)?;
    let (_, hist) = train_on(cfg, &ds, arch, model_out)?;
    let (best_epoch, best_acc) = hist
        .best_epoch
        .and_then(|be| hist.epochs.iter().find(|e| e.epoch == be))
        .map(|e| (e.epoch, e.val_acc))
        .unwrap_or((0, 0.0));
    println!(
        "trained {} for {} epochs (best val accuracy {:.4} at epoch {}); wrote {} and {}",
        arch.name(),
        hist.epochs.len(),
        best_acc,
        best_epoch,
        model_out.display(),
        history_path(model_out).display(),
    );
    Ok(())
}

/// Confusion matrix as CSV with class names on both axes.
pub fn confusion_csv(report: &EvalReport) -> String {
    let n = report.confusion.len();
    let mut out = String::new();
    for c in 0..n {
        out.push_str(&format!(",Tx{c}"));
    }
    out.push('\n');
    for (t, row) in report.confusion.iter().enumerate() {
        out.push_str(&format!("Tx{t}"));
        for &count in row {
            out.push_str(&format!(",{count}"));
        }
        out.push('\n');
    }
    out
}

pub fn summary_line(report: &EvalReport) -> String {
    format!("accuracy={:.6}", report.accuracy)
}

fn write_report(dir: &Path, prefix: &str, report: &EvalReport) -> Result<(), CliError> {
    let stem = |name: &str| {
        if prefix.is_empty() {
            dir.join(name)
        } else {
            dir.join(format!("{prefix}.{name}"))
        }
    };
    std::fs::write(stem("confusion.csv"), confusion_csv(report))?;
    std::fs::write(stem("summary.txt"), format!("{}\n", summary_line(report)))?;
    Ok(())
}

pub fn cmd_eval(
    model_path: &Path,
    dataset: &Path,
    out: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let model = load_model(model_path)?;
    let ds = read_dataset(dataset)?;
    let report = evaluate_parallel(&model, &ds, SplitTag::Eval, ea_threads()?)?;
    print!("{}", confusion_csv(&report));
    println!("{}", summary_line(&report));
    if let Some(dir) = out {
        require_dir(dir)?;
        write_report(dir, "", &report)?;
    }
    Ok(report)
}

/// Full pipeline: generate, train both architectures, evaluate both, and
/// print a side-by-side result table.
pub fn cmd_e2e(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)?;
    let t_total = Instant::now();

    println!("== generate ==");
    let ds = cmd_generate(cfg, out)?;

    let mut rows = Vec::new();
    for arch in [ArchChoice::Dcnn, ArchChoice::Mcm] {
        println!("== train {} ==", arch.name());
        let t = Instant::now();
        let model_out = out.join(format!("{}.model", arch.name()));
        let (model, hist) = train_on(cfg, &ds, arch, &model_out)?;
        let report = evaluate_parallel(&model, &ds, SplitTag::Eval, ea_threads()?)?;
        write_report(out, arch.name(), &report)?;
        let wall = t.elapsed().as_secs_f64();
        println!(
            "{}: {} epochs, eval accuracy {:.6} ({wall:.1}s)",
            arch.name(),
            hist.epochs.len(),
            report.accuracy
        );
        rows.push((arch.name(), report.accuracy, hist.epochs.len(), wall));
    }

    println!();
    println!("{:<6} {:>13} {:>7} {:>8}", "arch", "eval_accuracy", "epochs", "wall_s");
    for (name, acc, epochs, wall) in &rows {
        println!("{name:<6} {acc:>13.6} {epochs:>7} {wall:>8.1}");
    }
    println!("total wall time {:.1}s", t_total.elapsed().as_secs_f64());
    Ok(())
}
