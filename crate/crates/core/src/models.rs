//! The two classifier architectures, their training loop, evaluation, and
//! on-disk model files.
//!
//! DCNN: one feature (the planes of a single reference/receiver pair) through
//! four conv+SeLU stages, flatten, a tanh dense layer, and a linear class
//! head. DCNN-MCM: the four receiver views of one reference feed four
//! independent conv branches; each branch is pooled to its channel means and
//! the concatenation goes straight to the class head.

use crate::dataset::{LabeledDataset, SplitTag};
use crate::nn::weights::WeightsError;
use crate::nn::{
    read_tensors_from, softmax, softmax_cross_entropy, write_tensors_to, AdamConfig, AdamState,
    LayerKind, Network, NnError, Real, SeluParams, Tensor,
};
use crate::seeds;
use crate::sim::N_RX;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const ARCH_TAG_DCNN: u8 = 1;
pub const ARCH_TAG_MCM: u8 = 2;

const SEED_TAG_EPOCH: u64 = 0x77;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model config: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("requested split has no examples")]
    EmptySplit,
    #[error("bad magic bytes (not a model file)")]
    BadMagic,
    #[error("unsupported model version {0}")]
    VersionMismatch(u32),
    #[error("file ends early or sizes disagree")]
    TruncatedFile,
    #[error("stored architecture does not match: {0}")]
    ArchMismatch(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<NnError> for ModelError {
    fn from(e: NnError) -> Self {
        match e {
            NnError::BadHyper(msg) => ModelError::BadConfig(msg),
            other => ModelError::ShapeMismatch(other.to_string()),
        }
    }
}

impl From<WeightsError> for ModelError {
    fn from(e: WeightsError) -> Self {
        match e {
            WeightsError::BadMagic => ModelError::BadMagic,
            WeightsError::VersionMismatch(v) => ModelError::VersionMismatch(v),
            WeightsError::TruncatedFile => ModelError::TruncatedFile,
            WeightsError::Io(msg) => ModelError::Io(msg),
        }
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelError::TruncatedFile
        } else {
            ModelError::Io(e.to_string())
        }
    }
}

/// One conv stage: filter count and kernel width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

fn stacked_len(input_len: usize, specs: &[ConvSpec]) -> Result<usize, ModelError> {
    let mut len = input_len;
    for (i, s) in specs.iter().enumerate() {
        if s.filters == 0 || s.kernel == 0 {
            return Err(ModelError::BadConfig(format!("conv stage {i} has a zero dimension")));
        }
        if s.kernel > len {
            return Err(ModelError::BadConfig(format!(
                "conv stage {i} kernel {} exceeds remaining length {len}",
                s.kernel
            )));
        }
        len = len - s.kernel + 1;
    }
    Ok(len)
}

/// Single-feature architecture.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcnnConfig {
    /// Exactly four stages.
    pub conv_specs: Vec<ConvSpec>,
    pub dense_width: usize,
    pub n_classes: usize,
    pub selu: SeluParams,
    pub input_planes: usize,
    pub input_len: usize,
}

impl Default for DcnnConfig {
    fn default() -> Self {
        Self {
            conv_specs: vec![
                ConvSpec { filters: 16, kernel: 7 },
                ConvSpec { filters: 32, kernel: 5 },
                ConvSpec { filters: 64, kernel: 3 },
                ConvSpec { filters: 64, kernel: 3 },
            ],
            dense_width: 128,
            n_classes: 4,
            selu: SeluParams::canonical(),
            input_planes: 4,
            input_len: 256,
        }
    }
}

impl DcnnConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.conv_specs.len() != 4 {
            return Err(ModelError::BadConfig(format!(
                "architecture is fixed at 4 conv stages, got {}",
                self.conv_specs.len()
            )));
        }
        if self.dense_width == 0 || self.n_classes < 2 || self.input_planes == 0 {
            return Err(ModelError::BadConfig("zero-sized dcnn dimension".into()));
        }
        self.selu.validate()?;
        stacked_len(self.input_len, &self.conv_specs)?;
        Ok(())
    }
}

/// Four-branch architecture; each branch sees one receiver's planes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmConfig {
    pub n_branches: usize,
    /// Exactly four stages, identical shape in every branch; weights are
    /// independent per branch.
    pub conv_specs: Vec<ConvSpec>,
    pub n_classes: usize,
    pub selu: SeluParams,
    /// Planes per receiver (branch input channels).
    pub input_planes: usize,
    pub input_len: usize,
}

impl Default for McmConfig {
    fn default() -> Self {
        // Quarter-width branches keep the four-branch total near DCNN scale.
        Self {
            n_branches: N_RX,
            conv_specs: vec![
                ConvSpec { filters: 8, kernel: 7 },
                ConvSpec { filters: 16, kernel: 5 },
                ConvSpec { filters: 32, kernel: 3 },
                ConvSpec { filters: 32, kernel: 3 },
            ],
            n_classes: 4,
            selu: SeluParams::canonical(),
            input_planes: 4,
            input_len: 256,
        }
    }
}

impl McmConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_branches != N_RX {
            return Err(ModelError::BadConfig(format!(
                "one branch per receiver ({N_RX}), got {}",
                self.n_branches
            )));
        }
        if self.conv_specs.len() != 4 {
            return Err(ModelError::BadConfig(format!(
                "architecture is fixed at 4 conv stages, got {}",
                self.conv_specs.len()
            )));
        }
        if self.n_classes < 2 || self.input_planes == 0 {
            return Err(ModelError::BadConfig("zero-sized mcm dimension".into()));
        }
        self.selu.validate()?;
        stacked_len(self.input_len, &self.conv_specs)?;
        Ok(())
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Zero-mean Gaussian with variance 1/fan_in, drawn in f64 then cast.
    fn tensor<T: Real>(&mut self, dims: &[usize], fan_in: usize) -> Tensor<T> {
        let normal = Normal::new(0.0f64, (1.0 / fan_in as f64).sqrt()).expect("positive sigma");
        let data = (0..dims.iter().product::<usize>())
            .map(|_| T::from_f64(normal.sample(&mut self.rng)))
            .collect();
        Tensor::from_vec(dims, data).expect("count matches dims")
    }

    fn conv<T: Real>(&mut self, out_ch: usize, in_ch: usize, k: usize) -> LayerKind<T> {
        LayerKind::Conv1d {
            weight: self.tensor(&[out_ch, in_ch, k], in_ch * k),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    fn dense<T: Real>(&mut self, out: usize, inp: usize) -> LayerKind<T> {
        LayerKind::Dense { weight: self.tensor(&[out, inp], inp), bias: Tensor::zeros(&[out]) }
    }
}

fn conv_stack<T: Real>(
    init: &mut Init,
    in_ch: usize,
    specs: &[ConvSpec],
    selu: &SeluParams,
) -> Vec<LayerKind<T>> {
    let mut layers = Vec::with_capacity(2 * specs.len());
    let mut ch = in_ch;
    for s in specs {
        layers.push(init.conv(s.filters, ch, s.kernel));
        layers.push(LayerKind::selu(selu));
        ch = s.filters;
    }
    layers
}

/// The DCNN stack, generic so the gradient checker can build it in f64.
pub fn dcnn_network<T: Real>(cfg: &DcnnConfig, seed: u64) -> Result<Network<T>, ModelError> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut layers = conv_stack(&mut init, cfg.input_planes, &cfg.conv_specs, &cfg.selu);
    let out_len = stacked_len(cfg.input_len, &cfg.conv_specs)?;
    let flat = cfg.conv_specs.last().unwrap().filters * out_len;
    layers.push(LayerKind::Flatten);
    layers.push(init.dense(cfg.dense_width, flat));
    layers.push(LayerKind::TanhAct);
    layers.push(init.dense(cfg.n_classes, cfg.dense_width));
    Ok(Network::new(layers))
}

/// The branched stack; branch weights are drawn independently.
pub fn mcm_network<T: Real>(cfg: &McmConfig, seed: u64) -> Result<Network<T>, ModelError> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let mut branches = Vec::with_capacity(cfg.n_branches);
    for _ in 0..cfg.n_branches {
        let mut layers = conv_stack(&mut init, cfg.input_planes, &cfg.conv_specs, &cfg.selu);
        layers.push(LayerKind::GlobalAvgPool);
        branches.push(Network::new(layers));
    }
    let concat = cfg.n_branches * cfg.conv_specs.last().unwrap().filters;
    let layers = vec![LayerKind::Branches(branches), init.dense(cfg.n_classes, concat)];
    Ok(Network::new(layers))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArchKind {
    Dcnn(DcnnConfig),
    Mcm(McmConfig),
}

impl ArchKind {
    pub fn tag(&self) -> u8 {
        match self {
            ArchKind::Dcnn(_) => ARCH_TAG_DCNN,
            ArchKind::Mcm(_) => ARCH_TAG_MCM,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ArchKind::Dcnn(c) => c.n_classes,
            ArchKind::Mcm(c) => c.n_classes,
        }
    }

    /// `[channels, length]` the network expects.
    pub fn input_dims(&self) -> [usize; 2] {
        match self {
            ArchKind::Dcnn(c) => [c.input_planes, c.input_len],
            ArchKind::Mcm(c) => [c.n_branches * c.input_planes, c.input_len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchKind,
    pub net: Network<f32>,
}

impl Model {
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        Ok(self.net.forward(x)?)
    }

    pub fn probabilities(&self, x: &Tensor<f32>) -> Result<Vec<f32>, ModelError> {
        Ok(softmax(self.logits(x)?.data()))
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<usize, ModelError> {
        Ok(argmax(self.logits(x)?.data()))
    }
}

pub fn build_dcnn(cfg: &DcnnConfig, seed: u64) -> Result<Model, ModelError> {
    Ok(Model { arch: ArchKind::Dcnn(cfg.clone()), net: dcnn_network(cfg, seed)? })
}

pub fn build_dcnn_mcm(cfg: &McmConfig, seed: u64) -> Result<Model, ModelError> {
    Ok(Model { arch: ArchKind::Mcm(cfg.clone()), net: mcm_network(cfg, seed)? })
}

/// Ties resolve to the lowest class id.
fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation accuracy before stopping.
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 514,
            max_epochs: 200,
            patience: 10,
            adam: AdamConfig::default(),
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 || self.patience == 0 {
            return Err(ModelError::BadConfig("batch_size and patience must be >= 1".into()));
        }
        self.adam.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    /// Index into `epochs` of the restored weights (max val accuracy, ties
    /// to the earliest).
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// One training unit: a lone example for the DCNN, a four-receiver group for
/// the MCM.
#[derive(Debug, Clone, Copy)]
enum Unit {
    Single(usize),
    Group([usize; 4]),
}

fn split_units(
    ds: &LabeledDataset,
    tag: SplitTag,
    arch: &ArchKind,
) -> Result<Vec<Unit>, ModelError> {
    let units: Vec<Unit> = match arch {
        ArchKind::Dcnn(_) => ds.indices(tag).into_iter().map(Unit::Single).collect(),
        ArchKind::Mcm(_) => ds.receiver_groups(tag).into_iter().map(Unit::Group).collect(),
    };
    if units.is_empty() {
        return Err(ModelError::EmptySplit);
    }
    Ok(units)
}

fn check_dataset_shape(ds: &LabeledDataset, arch: &ArchKind) -> Result<(), ModelError> {
    let (planes, len, classes) = match arch {
        ArchKind::Dcnn(c) => (c.input_planes, c.input_len, c.n_classes),
        ArchKind::Mcm(c) => (c.input_planes, c.input_len, c.n_classes),
    };
    if ds.n_planes as usize != planes
        || ds.plane_len as usize != len
        || ds.n_classes as usize != classes
    {
        return Err(ModelError::ShapeMismatch(format!(
            "dataset ({} planes x {}, {} classes) vs model ({planes} planes x {len}, {classes} classes)",
            ds.n_planes, ds.plane_len, ds.n_classes
        )));
    }
    Ok(())
}

fn unit_input(ds: &LabeledDataset, unit: &Unit, dims: [usize; 2]) -> Tensor<f32> {
    let data = match unit {
        Unit::Single(i) => ds.examples[*i].feature.clone(),
        Unit::Group(members) => {
            let mut data = Vec::with_capacity(dims[0] * dims[1]);
            for &i in members {
                data.extend_from_slice(&ds.examples[i].feature);
            }
            data
        }
    };
    Tensor::from_vec(&dims, data).expect("shape pre-checked against dataset metadata")
}

fn unit_label(ds: &LabeledDataset, unit: &Unit) -> usize {
    match unit {
        Unit::Single(i) => ds.examples[*i].label as usize,
        Unit::Group(members) => ds.examples[members[0]].label as usize,
    }
}

/// Mean loss and accuracy of the current weights over `units`.
fn evaluate_units(
    model: &Model,
    ds: &LabeledDataset,
    units: &[Unit],
) -> Result<(f64, f64), ModelError> {
    let dims = model.arch.input_dims();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for unit in units {
        let x = unit_input(ds, unit, dims);
        let logits = model.net.forward(&x)?;
        let label = unit_label(ds, unit);
        let (loss, _) = softmax_cross_entropy(&logits, label)?;
        loss_sum += loss as f64;
        if argmax(logits.data()) == label {
            correct += 1;
        }
    }
    Ok((loss_sum / units.len() as f64, correct as f64 / units.len() as f64))
}

/// Adam over shuffled train batches with early stopping on validation
/// accuracy; the best-validation weights are restored before returning.
/// Single-threaded and bit-reproducible for a given `tc.seed`.
pub fn train(
    model: &mut Model,
    ds: &LabeledDataset,
    tc: &TrainConfig,
) -> Result<TrainingHistory, ModelError> {
    tc.validate()?;
    ds.validate().map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
    check_dataset_shape(ds, &model.arch)?;
    let mut train_units = split_units(ds, SplitTag::Train, &model.arch)?;
    let val_units = split_units(ds, SplitTag::Val, &model.arch)?;
    let dims = model.arch.input_dims();

    let mut history = TrainingHistory::default();
    if tc.max_epochs == 0 {
        return Ok(history);
    }

    let mut adam = AdamState::new(model.net.param_count(), tc.adam)?;
    let mut grads = model.net.zeros_like();
    let mut best: Option<(f64, f64, Vec<f32>)> = None;
    let mut since_best = 0usize;

    for epoch in 0..tc.max_epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(tc.seed, &[SEED_TAG_EPOCH, epoch as u64]));
        train_units.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in train_units.chunks(tc.batch_size) {
            grads.zero_params();
            for unit in batch {
                let x = unit_input(ds, unit, dims);
                let label = unit_label(ds, unit);
                let trace = model.net.trace(&x)?;
                let logits = trace.last().unwrap();
                let (loss, dlogits) = softmax_cross_entropy(logits, label)?;
                loss_sum += loss as f64;
                if argmax(logits.data()) == label {
                    correct += 1;
                }
                model.net.backward(&trace, &dlogits, &mut grads)?;
            }
            grads.scale_params(1.0 / batch.len() as f32);
            let mut params = model.net.flat_params();
            adam.step(&mut params, &grads.flat_params())?;
            model.net.set_flat_params(&params)?;
        }

        let (val_loss, val_acc) = evaluate_units(model, ds, &val_units)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_units.len() as f64,
            train_acc: correct as f64 / train_units.len() as f64,
            val_loss,
            val_acc,
        });

        // Accuracy first; loss breaks ties so training keeps refining (and
        // patience keeps running) after validation accuracy saturates.
        let improved = best
            .as_ref()
            .is_none_or(|&(acc, loss, _)| val_acc > acc || (val_acc == acc && val_loss < loss));
        if improved {
            best = Some((val_acc, val_loss, model.net.flat_params()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    if let Some((_, _, params)) = best {
        model.net.set_flat_params(&params)?;
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true_class][predicted_class]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub n_evaluated: usize,
}

/// Builds the report from parallel truth/prediction lists; shared by the
/// model path and by oracle tests that bypass any network.
pub fn report_from_predictions(
    truths: &[usize],
    preds: &[usize],
    n_classes: usize,
) -> Result<EvalReport, ModelError> {
    if truths.len() != preds.len() || truths.is_empty() {
        return Err(ModelError::EmptySplit);
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truths.iter().zip(preds) {
        if t >= n_classes || p >= n_classes {
            return Err(ModelError::ShapeMismatch(format!(
                "class {t}/{p} outside {n_classes} classes"
            )));
        }
        confusion[t][p] += 1;
    }
    let total = truths.len();
    let trace: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = (0..n_classes)
        .map(|c| ratio(confusion[c][c], (0..n_classes).map(|t| confusion[t][c]).sum()))
        .collect();
    let recall = (0..n_classes).map(|c| ratio(confusion[c][c], confusion[c].iter().sum())).collect();
    Ok(EvalReport {
        accuracy: trace as f64 / total as f64,
        confusion,
        precision,
        recall,
        n_evaluated: total,
    })
}

/// Argmax predictions over one split. Inference only; parameters are
/// untouched. `n_threads` > 1 shards units across workers and merges in unit
/// order, which cannot change the result because each unit is independent.
pub fn evaluate_parallel(
    model: &Model,
    ds: &LabeledDataset,
    tag: SplitTag,
    n_threads: usize,
) -> Result<EvalReport, ModelError> {
    check_dataset_shape(ds, &model.arch)?;
    let units = split_units(ds, tag, &model.arch)?;
    let dims = model.arch.input_dims();
    let truths: Vec<usize> = units.iter().map(|u| unit_label(ds, u)).collect();

    let workers = n_threads.max(1).min(units.len());
    let preds: Vec<usize> = if workers == 1 {
        let mut out = Vec::with_capacity(units.len());
        for unit in &units {
            out.push(argmax(model.net.forward(&unit_input(ds, unit, dims))?.data()));
        }
        out
    } else {
        let chunk = units.len().div_ceil(workers);
        let results: Vec<Result<Vec<usize>, ModelError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = units
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        let mut out = Vec::with_capacity(part.len());
                        for unit in part {
                            out.push(argmax(
                                model.net.forward(&unit_input(ds, unit, dims))?.data(),
                            ));
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        let mut merged = Vec::with_capacity(units.len());
        for r in results {
            merged.extend(r?);
        }
        merged
    };

    report_from_predictions(&truths, &preds, model.arch.n_classes())
}

pub fn evaluate(model: &Model, ds: &LabeledDataset, tag: SplitTag) -> Result<EvalReport, ModelError> {
    evaluate_parallel(model, ds, tag, 1)
}

const MODEL_VERSION: u32 = 1;

fn arch_config_text(arch: &ArchKind) -> String {
    match arch {
        ArchKind::Dcnn(c) => toml::to_string(c).expect("plain struct serializes"),
        ArchKind::Mcm(c) => toml::to_string(c).expect("plain struct serializes"),
    }
}

/// Model file: u8 arch tag, u32 version, length-prefixed UTF-8 config text,
/// then the `EAWT` weights container.
pub fn save_model(path: &Path, model: &Model) -> Result<(), ModelError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&[model.arch.tag()])?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    let text = arch_config_text(&model.arch);
    w.write_all(&(text.len() as u32).to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    write_tensors_to(&mut w, &model.net.tensors())?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model, ModelError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let mut quad = [0u8; 4];
    r.read_exact(&mut quad)?;
    let version = u32::from_le_bytes(quad);
    if version != MODEL_VERSION {
        return Err(ModelError::VersionMismatch(version));
    }
    r.read_exact(&mut quad)?;
    let text_len = u32::from_le_bytes(quad) as usize;
    let mut text = vec![0u8; text_len];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text)
        .map_err(|_| ModelError::BadConfig("config text is not UTF-8".into()))?;

    let (arch, mut net) = match tag[0] {
        ARCH_TAG_DCNN => {
            let cfg: DcnnConfig =
                toml::from_str(&text).map_err(|e| ModelError::BadConfig(e.to_string()))?;
            let net = dcnn_network::<f32>(&cfg, 0)?;
            (ArchKind::Dcnn(cfg), net)
        }
        ARCH_TAG_MCM => {
            let cfg: McmConfig =
                toml::from_str(&text).map_err(|e| ModelError::BadConfig(e.to_string()))?;
            let net = mcm_network::<f32>(&cfg, 0)?;
            (ArchKind::Mcm(cfg), net)
        }
        other => return Err(ModelError::ArchMismatch(format!("unknown arch tag {other}"))),
    };

    let tensors = read_tensors_from(&mut r)?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(ModelError::TruncatedFile);
    }
    net.set_tensors(&tensors)
        .map_err(|e| ModelError::ArchMismatch(format!("weights do not fit the stored config: {e}")))?;
    Ok(Model { arch, net })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, BuildConfig};
    use crate::nn::grad_check;
    use crate::sim::{default_plan, sample_mimo_channel, BandLengths, ChannelConfig};
    use rand::Rng;

    fn tiny_dcnn_cfg() -> DcnnConfig {
        DcnnConfig {
            conv_specs: vec![
                ConvSpec { filters: 4, kernel: 7 },
                ConvSpec { filters: 6, kernel: 5 },
                ConvSpec { filters: 8, kernel: 3 },
                ConvSpec { filters: 8, kernel: 3 },
            ],
            dense_width: 32,
            ..Default::default()
        }
    }

    fn tiny_mcm_cfg() -> McmConfig {
        McmConfig {
            conv_specs: vec![
                ConvSpec { filters: 2, kernel: 7 },
                ConvSpec { filters: 4, kernel: 5 },
                ConvSpec { filters: 4, kernel: 3 },
                ConvSpec { filters: 4, kernel: 3 },
            ],
            ..Default::default()
        }
    }

    fn small_dataset(seed: u64) -> LabeledDataset {
        let plan = default_plan(&BandLengths::default()).unwrap();
        let channel = sample_mimo_channel(seed, &ChannelConfig::default()).unwrap();
        let cfg = BuildConfig { snapshots_per_test: 1, snr_db: None, seed, ..Default::default() };
        build_dataset(&plan, &channel, &cfg).unwrap()
    }

    fn rand_input(rng: &mut impl Rng, dims: [usize; 2]) -> Tensor<f32> {
        let data = (0..dims[0] * dims[1]).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(&dims, data).unwrap()
    }

    #[test]
    fn dcnn_head_is_a_probability_vector() {
        let model = build_dcnn(&DcnnConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = model.probabilities(&rand_input(&mut rng, model.arch.input_dims())).unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dcnn_layer_inventory() {
        let model = build_dcnn(&DcnnConfig::default(), 3).unwrap();
        let convs = model
            .net
            .layers
            .iter()
            .filter(|l| matches!(l, LayerKind::Conv1d { .. }))
            .count();
        let denses =
            model.net.layers.iter().filter(|l| matches!(l, LayerKind::Dense { .. })).count();
        let flattens = model.net.layers.iter().filter(|l| matches!(l, LayerKind::Flatten)).count();
        assert_eq!((convs, flattens, denses), (4, 1, 2));
        assert!(!model.net.layers.iter().any(|l| matches!(l, LayerKind::GlobalAvgPool)));
    }

    #[test]
    fn builds_are_deterministic_in_seed() {
        let a = build_dcnn(&DcnnConfig::default(), 9).unwrap();
        let b = build_dcnn(&DcnnConfig::default(), 9).unwrap();
        let c = build_dcnn(&DcnnConfig::default(), 10).unwrap();
        assert_eq!(a.net, b.net);
        assert_ne!(a.net, c.net);
    }

    #[test]
    fn mcm_shape_and_branch_count() {
        let cfg = McmConfig::default();
        let model = build_dcnn_mcm(&cfg, 4).unwrap();
        let LayerKind::Branches(branches) = &model.net.layers[0] else {
            panic!("first layer must be the branch split");
        };
        assert_eq!(branches.len(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_input(&mut rng, model.arch.input_dims());
        let concat = branches[0].forward(&{
            let mut d = Vec::new();
            for c in 0..cfg.input_planes {
                d.extend_from_slice(x.row(c));
            }
            Tensor::from_vec(&[cfg.input_planes, cfg.input_len], d).unwrap()
        });
        assert_eq!(concat.unwrap().numel(), cfg.conv_specs.last().unwrap().filters);
        let p = model.probabilities(&x).unwrap();
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pooled_branch_output_is_permutation_invariant() {
        // The branch ends in a channel mean, so shuffling the time axis of the
        // map entering the pool cannot change the branch output.
        let cfg = tiny_mcm_cfg();
        let model = build_dcnn_mcm(&cfg, 11).unwrap();
        let LayerKind::Branches(branches) = &model.net.layers[0] else {
            panic!("first layer must be the branch split");
        };
        let branch = &branches[0];
        let convs = Network::new(branch.layers[..branch.layers.len() - 1].to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_input(&mut rng, [cfg.input_planes, cfg.input_len]);
        let map = convs.forward(&x).unwrap();

        let mut perm: Vec<usize> = (0..map.dims()[1]).collect();
        perm.shuffle(&mut rng);
        let mut shuffled = Tensor::zeros(map.dims());
        for c in 0..map.dims()[0] {
            for (dst, &src) in perm.iter().enumerate() {
                shuffled.row_mut(c)[dst] = map.row(c)[src];
            }
        }
        let pool = LayerKind::GlobalAvgPool;
        let a = pool.forward(&map).unwrap();
        let b = pool.forward(&shuffled).unwrap();
        for (av, bv) in a.data().iter().zip(b.data()) {
            assert!((av - bv).abs() < 1e-5);
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut cfg = DcnnConfig::default();
        cfg.conv_specs.pop();
        assert!(matches!(build_dcnn(&cfg, 0), Err(ModelError::BadConfig(_))));

        let cfg = DcnnConfig {
            conv_specs: vec![
                ConvSpec { filters: 4, kernel: 200 },
                ConvSpec { filters: 4, kernel: 200 },
                ConvSpec { filters: 4, kernel: 3 },
                ConvSpec { filters: 4, kernel: 3 },
            ],
            ..Default::default()
        };
        assert!(matches!(build_dcnn(&cfg, 0), Err(ModelError::BadConfig(_))));

        let cfg = McmConfig { n_branches: 3, ..Default::default() };
        assert!(matches!(build_dcnn_mcm(&cfg, 0), Err(ModelError::BadConfig(_))));
    }

    #[test]
    fn training_reduces_loss_and_restores_best() {
        let ds = small_dataset(21);
        let mut model = build_dcnn(&tiny_dcnn_cfg(), 21).unwrap();
        let tc = TrainConfig { max_epochs: 8, batch_size: 32, ..Default::default() };
        let history = train(&mut model, &ds, &tc).unwrap();
        assert!(!history.epochs.is_empty());
        let first = &history.epochs[0];
        let last = history.epochs.last().unwrap();
        assert!(
            last.train_loss < first.train_loss,
            "loss should fall: {} -> {}",
            first.train_loss,
            last.train_loss
        );
        let best = history.best_epoch.unwrap();
        let best_acc = history.epochs[best].val_acc;
        let best_loss = history.epochs[best].val_loss;
        for e in &history.epochs {
            assert!(e.val_acc <= best_acc);
            if e.val_acc == best_acc && e.epoch != best {
                assert!(
                    e.val_loss > best_loss || (e.val_loss == best_loss && e.epoch > best),
                    "accuracy ties resolve to the lowest validation loss, then earliest epoch"
                );
            }
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let ds = small_dataset(22);
        let mut model = build_dcnn(&tiny_dcnn_cfg(), 22).unwrap();
        let before = model.net.clone();
        let tc = TrainConfig { max_epochs: 0, ..Default::default() };
        let history = train(&mut model, &ds, &tc).unwrap();
        assert!(history.epochs.is_empty());
        assert_eq!(history.best_epoch, None);
        assert_eq!(model.net, before);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = small_dataset(23);
        let tc = TrainConfig { max_epochs: 3, batch_size: 32, ..Default::default() };
        let run = || {
            let mut model = build_dcnn(&tiny_dcnn_cfg(), 23).unwrap();
            let h = train(&mut model, &ds, &tc).unwrap();
            (model, h)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1.net.flat_params(), m2.net.flat_params());
    }

    #[test]
    fn mcm_trains_on_receiver_groups() {
        let ds = small_dataset(24);
        let mut model = build_dcnn_mcm(&tiny_mcm_cfg(), 24).unwrap();
        let tc = TrainConfig { max_epochs: 2, batch_size: 16, ..Default::default() };
        let history = train(&mut model, &ds, &tc).unwrap();
        assert_eq!(history.epochs.len(), 2);
        let report = evaluate(&model, &ds, SplitTag::Eval).unwrap();
        assert_eq!(report.n_evaluated, 8, "two eval tests x one snapshot x four refs");
    }

    #[test]
    fn evaluation_does_not_mutate_and_shards_consistently() {
        let ds = small_dataset(25);
        let model = build_dcnn(&tiny_dcnn_cfg(), 25).unwrap();
        let before = model.net.flat_params();
        let serial = evaluate(&model, &ds, SplitTag::Eval).unwrap();
        let sharded = evaluate_parallel(&model, &ds, SplitTag::Eval, 4).unwrap();
        assert_eq!(model.net.flat_params(), before);
        assert_eq!(serial, sharded);
        let total: usize = serial.confusion.iter().flatten().sum();
        assert_eq!(total, serial.n_evaluated);
    }

    #[test]
    fn report_oracle_and_constant_predictor() {
        let truths = vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 0];
        let perfect = report_from_predictions(&truths, &truths, 4).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        for (t, row) in perfect.confusion.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                assert_eq!(n, if t == p { truths.iter().filter(|&&v| v == t).count() } else { 0 });
            }
        }

        let constant = vec![0usize; truths.len()];
        let report = report_from_predictions(&truths, &constant, 4).unwrap();
        assert_eq!(report.accuracy, 0.4, "accuracy equals the majority-class prior");
        for (t, row) in report.confusion.iter().enumerate() {
            let want: usize = truths.iter().filter(|&&v| v == t).count();
            assert_eq!(row.iter().sum::<usize>(), want, "row sums are the true counts");
        }
    }

    #[test]
    fn full_architecture_gradients_match_finite_differences() {
        // Reduced widths keep the exhaustive parameter sweep tractable; the
        // layer sequence is exactly the production stack. The seeds are
        // pinned so every SeLU pre-activation keeps a safe margin from the
        // derivative jump at 0, where a finite difference would straddle the
        // kink and report a false mismatch; the margin is asserted so a
        // drifting seed fails loudly instead of flaking.
        let eps = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(234);
        let mut input = |dims: [usize; 2]| {
            let data =
                (0..dims[0] * dims[1]).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
            Tensor::from_vec(&dims, data).unwrap()
        };

        let dcnn = DcnnConfig { input_len: 64, ..tiny_dcnn_cfg() };
        let net = dcnn_network::<f64>(&dcnn, 34).unwrap();
        let x = input([dcnn.input_planes, dcnn.input_len]);
        let margin = net.selu_kink_margin(&x).unwrap();
        assert!(margin > 4.0 * eps, "dcnn kink margin {margin} too small for step {eps}");
        let worst = grad_check(&net, &x, 1, eps).unwrap();
        assert!(worst < 1e-4, "dcnn max relative error {worst}");

        let mcm = McmConfig { input_len: 64, ..tiny_mcm_cfg() };
        let net = mcm_network::<f64>(&mcm, 134).unwrap();
        let x = input([4 * mcm.input_planes, mcm.input_len]);
        let margin = net.selu_kink_margin(&x).unwrap();
        assert!(margin > 4.0 * eps, "mcm kink margin {margin} too small for step {eps}");
        let worst = grad_check(&net, &x, 2, eps).unwrap();
        assert!(worst < 1e-4, "mcm max relative error {worst}");
    }

    #[test]
    fn model_files_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (name, model) in [
            ("d.eam", build_dcnn(&tiny_dcnn_cfg(), 41).unwrap()),
            ("m.eam", build_dcnn_mcm(&tiny_mcm_cfg(), 42).unwrap()),
        ] {
            let path = dir.path().join(name);
            save_model(&path, &model).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back.arch, model.arch);
            let mut rng = ChaCha8Rng::seed_from_u64(43);
            for _ in 0..100 {
                let x = rand_input(&mut rng, model.arch.input_dims());
                assert_eq!(back.logits(&x).unwrap(), model.logits(&x).unwrap());
            }
        }
    }

    #[test]
    fn model_file_corruption_and_arch_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.eam");
        let model = build_dcnn(&tiny_dcnn_cfg(), 51).unwrap();
        save_model(&path, &model).unwrap();
        let good = std::fs::read(&path).unwrap();

        std::fs::write(&path, &good[..good.len() - 7]).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::TruncatedFile)));

        // Valid DCNN header and config, MCM weight payload: shape check fails.
        let mcm = build_dcnn_mcm(&tiny_mcm_cfg(), 52).unwrap();
        let mcm_path = dir.path().join("w.eam");
        save_model(&mcm_path, &mcm).unwrap();
        let mcm_bytes = std::fs::read(&mcm_path).unwrap();
        let magic_at = |bytes: &[u8]| {
            bytes.windows(4).position(|w| w == b"EAWT").expect("weights block present")
        };
        let mut franken = good[..magic_at(&good)].to_vec();
        franken.extend_from_slice(&mcm_bytes[magic_at(&mcm_bytes)..]);
        std::fs::write(&path, &franken).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::ArchMismatch(_))));

        let mut bad = good.clone();
        bad[0] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::ArchMismatch(_))));
    }

    #[test]
    fn empty_split_is_reported() {
        let ds = small_dataset(26);
        let mut only_eval = ds.clone();
        for t in &mut only_eval.tags {
            *t = SplitTag::Eval;
        }
        let model = build_dcnn(&tiny_dcnn_cfg(), 26).unwrap();
        assert!(matches!(
            evaluate(&model, &only_eval, SplitTag::Train),
            Err(ModelError::EmptySplit)
        ));
    }
}
