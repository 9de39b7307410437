//! Labeled dataset assembly, split bookkeeping, and the on-disk container.
//!
//! One example is the feature planes of a single (transmitter reference,
//! receiver) pair in one snapshot, labeled with the transmitter index.
//! Evaluation examples come exclusively from evaluation-role tests; the
//! remaining pool is shuffled into 70% train / 30% validation at the
//! granularity of receiver groups (the four receiver views of one reference in
//! one snapshot move together, so grouped models see split-coherent groups).

use crate::chanest::{extract_features, ChanestError, FeatureConfig};
use crate::seeds;
use crate::sim::{
    drift_channel, synthesize_received, MimoChannel, SimError, TestRole, TransmissionPlan, N_RX,
    N_TX,
};
use crate::zc::zc_sequence;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const TRAIN_FRACTION: f64 = 0.70;
const MAGIC: &[u8; 4] = b"EACF";
const VERSION: u32 = 1;

const SEED_TAG_SNAPSHOT: u64 = 0x33;
const SEED_TAG_SPLIT: u64 = 0x44;
const SEED_TAG_PERMUTE: u64 = 0x55;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset contains no examples")]
    EmptyDataset,
    #[error("bad magic bytes (not a dataset file)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    VersionMismatch(u32),
    #[error("file ends early or sizes disagree")]
    TruncatedFile,
    #[error("unknown split tag {0}")]
    UnknownSplit(u8),
    #[error("dataset invariant violated: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("simulation failed: {0}")]
    Sim(String),
    #[error("feature extraction failed: {0}")]
    Extraction(String),
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DatasetError::TruncatedFile
        } else {
            DatasetError::Io(e.to_string())
        }
    }
}

impl From<SimError> for DatasetError {
    fn from(e: SimError) -> Self {
        DatasetError::Sim(e.to_string())
    }
}

impl From<ChanestError> for DatasetError {
    fn from(e: ChanestError) -> Self {
        DatasetError::Extraction(e.to_string())
    }
}

/// Split membership of one example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Eval,
}

impl SplitTag {
    pub fn to_u8(self) -> u8 {
        match self {
            SplitTag::Train => 0,
            SplitTag::Val => 1,
            SplitTag::Eval => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self, DatasetError> {
        match v {
            0 => Ok(SplitTag::Train),
            1 => Ok(SplitTag::Val),
            2 => Ok(SplitTag::Eval),
            other => Err(DatasetError::UnknownSplit(other)),
        }
    }
}

/// One labeled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    /// Transmitter index, `0..n_classes`.
    pub label: u8,
    pub rx_id: u8,
    pub test_id: u16,
    /// `n_planes * plane_len` values, plane-major.
    pub feature: Vec<f32>,
}

/// The assembled dataset with per-example split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<LabeledExample>,
    pub tags: Vec<SplitTag>,
    pub n_planes: u16,
    pub plane_len: u16,
    pub n_classes: u8,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Example indices belonging to a split, in dataset order.
    pub fn indices(&self, tag: SplitTag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == tag).then_some(i))
            .collect()
    }

    pub fn split_len(&self, tag: SplitTag) -> usize {
        self.tags.iter().filter(|&&t| t == tag).count()
    }

    /// Consecutive four-receiver groups fully inside `tag`, each the four
    /// receiver views of one (snapshot, reference). Grouped architectures
    /// train on these.
    pub fn receiver_groups(&self, tag: SplitTag) -> Vec<[usize; 4]> {
        let mut groups = Vec::new();
        let mut i = 0;
        while i + N_RX <= self.examples.len() {
            let head = &self.examples[i];
            let coherent = head.rx_id == 0
                && (1..N_RX).all(|k| {
                    let e = &self.examples[i + k];
                    e.rx_id as usize == k
                        && e.label == head.label
                        && e.test_id == head.test_id
                        && self.tags[i + k] == self.tags[i]
                });
            if coherent {
                if self.tags[i] == tag {
                    groups.push([i, i + 1, i + 2, i + 3]);
                }
                i += N_RX;
            } else {
                i += 1;
            }
        }
        groups
    }

    /// Structural checks run after every build and every read.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.examples.is_empty() {
            return Err(DatasetError::EmptyDataset);
        }
        if self.tags.len() != self.examples.len() {
            return Err(DatasetError::Invalid("tag count != example count".into()));
        }
        let want = self.n_planes as usize * self.plane_len as usize;
        let mut eval_tests = std::collections::BTreeSet::new();
        let mut pool_tests = std::collections::BTreeSet::new();
        for (ex, tag) in self.examples.iter().zip(&self.tags) {
            if ex.feature.len() != want {
                return Err(DatasetError::Invalid(format!(
                    "feature length {} != {}",
                    ex.feature.len(),
                    want
                )));
            }
            if ex.label >= self.n_classes {
                return Err(DatasetError::Invalid(format!("label {} out of range", ex.label)));
            }
            if ex.rx_id as usize >= N_RX {
                return Err(DatasetError::Invalid(format!("rx_id {} out of range", ex.rx_id)));
            }
            if !ex.feature.iter().all(|v| v.is_finite()) {
                return Err(DatasetError::Invalid("non-finite feature value".into()));
            }
            match tag {
                SplitTag::Eval => eval_tests.insert(ex.test_id),
                _ => pool_tests.insert(ex.test_id),
            };
        }
        if eval_tests.intersection(&pool_tests).next().is_some() {
            return Err(DatasetError::Invalid(
                "a test feeds both evaluation and train/val splits".into(),
            ));
        }
        Ok(())
    }
}

/// Dataset assembly knobs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildConfig {
    pub snapshots_per_test: usize,
    /// Sounding window length in periods of the longest sequence.
    pub repeats: usize,
    /// `None` disables receiver noise.
    pub snr_db: Option<f64>,
    pub seed: u64,
    pub feature: FeatureConfig,
    /// Per-snapshot tap phase drift in cycles (0 keeps channels static).
    pub drift_per_snapshot: f64,
    /// Shuffle labels across train/val receiver groups (control experiments).
    pub permute_train_labels: bool,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            snapshots_per_test: 8,
            repeats: 3,
            snr_db: Some(20.0),
            seed: 7,
            feature: FeatureConfig::default(),
            drift_per_snapshot: 0.0,
            permute_train_labels: false,
        }
    }
}

/// Synthesize, extract, label, and split every snapshot of every test.
pub fn build_dataset(
    plan: &TransmissionPlan,
    channel: &MimoChannel,
    cfg: &BuildConfig,
) -> Result<LabeledDataset, DatasetError> {
    cfg.feature.validate()?;
    if cfg.snapshots_per_test == 0 {
        return Err(DatasetError::Invalid("snapshots_per_test must be >= 1".into()));
    }
    plan.validate()?;

    let mut examples = Vec::new();
    let mut roles = Vec::new();
    // Indices of each four-receiver group, recorded at build time.
    let mut groups: Vec<(TestRole, Vec<usize>)> = Vec::new();

    for (test_idx, test) in plan.tests.iter().enumerate() {
        let mut sequences = Vec::new();
        for tx in 0..N_TX {
            if let Some(assignment) = test.reference(tx) {
                let seq = zc_sequence(&assignment.params).map_err(SimError::from)?;
                sequences.push((tx, seq));
            }
        }
        for snap in 0..cfg.snapshots_per_test {
            let snap_channel = drift_channel(channel, cfg.drift_per_snapshot, snap);
            let synth_seed =
                seeds::derive(cfg.seed, &[SEED_TAG_SNAPSHOT, test_idx as u64, snap as u64]);
            let bufs = synthesize_received(
                plan,
                test_idx,
                &snap_channel,
                cfg.snr_db,
                synth_seed,
                cfg.repeats,
            )?;
            let out = extract_features(&bufs, &sequences, test_idx as u16, &cfg.feature)?;
            let mut by_tx: std::collections::BTreeMap<u8, Vec<usize>> = Default::default();
            for f in out.features {
                let idx = examples.len();
                by_tx.entry(f.tx).or_default().push(idx);
                examples.push(LabeledExample {
                    label: f.tx,
                    rx_id: f.rx,
                    test_id: f.test_id,
                    feature: f.planes.into_iter().flatten().collect(),
                });
                roles.push(test.role);
            }
            for (_, members) in by_tx {
                groups.push((test.role, members));
            }
        }
    }

    if examples.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }

    let mut tags = vec![SplitTag::Eval; examples.len()];
    let pool_size = roles.iter().filter(|r| **r == TestRole::Train).count();
    let target_train = (TRAIN_FRACTION * pool_size as f64).round() as usize;

    let mut pool_groups: Vec<&Vec<usize>> = groups
        .iter()
        .filter_map(|(role, members)| (*role == TestRole::Train).then_some(members))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, &[SEED_TAG_SPLIT]));
    pool_groups.shuffle(&mut rng);

    // Whole groups go to TRAIN until the target count is hit; at most one
    // group straddles the boundary so the 70/30 example count is exact.
    let mut assigned = 0usize;
    for group in pool_groups {
        for &idx in group {
            tags[idx] = if assigned < target_train {
                assigned += 1;
                SplitTag::Train
            } else {
                SplitTag::Val
            };
        }
    }

    if cfg.permute_train_labels {
        permute_pool_labels(&mut examples, &groups, cfg.seed);
    }

    let ds = LabeledDataset {
        examples,
        tags,
        n_planes: cfg.feature.n_planes() as u16,
        plane_len: cfg.feature.plane_len() as u16,
        n_classes: N_TX as u8,
    };
    ds.validate()?;
    Ok(ds)
}

/// Shuffle labels across train/val groups, keeping each group's four receiver
/// views identically labeled and the overall label multiset intact.
fn permute_pool_labels(
    examples: &mut [LabeledExample],
    groups: &[(TestRole, Vec<usize>)],
    seed: u64,
) {
    let pool: Vec<&Vec<usize>> = groups
        .iter()
        .filter_map(|(role, members)| (*role == TestRole::Train).then_some(members))
        .collect();
    let mut labels: Vec<u8> = pool.iter().map(|g| examples[g[0]].label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, &[SEED_TAG_PERMUTE]));
    labels.shuffle(&mut rng);
    for (group, label) in pool.iter().zip(labels) {
        for &idx in *group {
            examples[idx].label = label;
        }
    }
}

/// Seeded epoch shuffle of one split, chunked into batches; the final batch
/// may be partial.
pub fn batch_iterator(
    ds: &LabeledDataset,
    tag: SplitTag,
    batch_size: usize,
    epoch_seed: u64,
) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be >= 1");
    let mut idx = ds.indices(tag);
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u16(w: &mut impl Write, v: u16) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], DatasetError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Serialize to the little-endian container (magic `EACF`, version 1).
pub fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<(), DatasetError> {
    ds.validate()?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, ds.examples.len() as u32)?;
    write_u16(&mut w, ds.n_planes)?;
    write_u16(&mut w, ds.plane_len)?;
    w.write_all(&[ds.n_classes, 0, 0, 0])?;
    for (ex, tag) in ds.examples.iter().zip(&ds.tags) {
        w.write_all(&[ex.label, ex.rx_id])?;
        write_u16(&mut w, ex.test_id)?;
        w.write_all(&[tag.to_u8(), 0, 0, 0])?;
        for v in &ex.feature {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a container written by [`write_dataset`]; every structural invariant
/// is re-checked.
pub fn read_dataset(path: &Path) -> Result<LabeledDataset, DatasetError> {
    let file = std::fs::File::open(path)?;
    let expected_len = file.metadata()?.len();
    let mut r = BufReader::new(file);
    let magic = read_exact::<4>(&mut r)?;
    if &magic != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = u32::from_le_bytes(read_exact::<4>(&mut r)?);
    if version != VERSION {
        return Err(DatasetError::VersionMismatch(version));
    }
    let n_examples = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
    let n_planes = u16::from_le_bytes(read_exact::<2>(&mut r)?);
    let plane_len = u16::from_le_bytes(read_exact::<2>(&mut r)?);
    let [n_classes, _, _, _] = read_exact::<4>(&mut r)?;

    let feat_len = n_planes as usize * plane_len as usize;
    let record = 8 + 4 * feat_len as u64;
    if expected_len != 20 + n_examples as u64 * record {
        return Err(DatasetError::TruncatedFile);
    }

    let mut examples = Vec::with_capacity(n_examples);
    let mut tags = Vec::with_capacity(n_examples);
    let mut raw = vec![0u8; 4 * feat_len];
    for _ in 0..n_examples {
        let [label, rx_id] = read_exact::<2>(&mut r)?;
        let test_id = u16::from_le_bytes(read_exact::<2>(&mut r)?);
        let [tag, _, _, _] = read_exact::<4>(&mut r)?;
        tags.push(SplitTag::from_u8(tag)?);
        r.read_exact(&mut raw)?;
        let feature = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        examples.push(LabeledExample { label, rx_id, test_id, feature });
    }
    let ds = LabeledDataset { examples, tags, n_planes, plane_len, n_classes };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{default_plan, sample_mimo_channel, BandLengths, ChannelConfig};

    fn small_cfg(seed: u64, snapshots: usize) -> BuildConfig {
        BuildConfig { snapshots_per_test: snapshots, seed, ..Default::default() }
    }

    fn build_small(seed: u64, snapshots: usize) -> LabeledDataset {
        let plan = default_plan(&BandLengths::default()).unwrap();
        let channel = sample_mimo_channel(seed, &ChannelConfig::default()).unwrap();
        build_dataset(&plan, &channel, &small_cfg(seed, snapshots)).unwrap()
    }

    #[test]
    fn counts_and_split_sizes() {
        let ds = build_small(1, 1);
        // 10 tests x 1 snapshot x 4 refs x 4 rx
        assert_eq!(ds.len(), 160);
        assert_eq!(ds.split_len(SplitTag::Eval), 32);
        let pool = 128;
        let train = ds.split_len(SplitTag::Train);
        let val = ds.split_len(SplitTag::Val);
        assert_eq!(train + val, pool);
        assert_eq!(train, (TRAIN_FRACTION * pool as f64).round() as usize);
    }

    #[test]
    fn eval_examples_come_only_from_eval_tests() {
        let ds = build_small(2, 1);
        for (ex, tag) in ds.examples.iter().zip(&ds.tags) {
            if *tag == SplitTag::Eval {
                assert!(ex.test_id < 2);
            } else {
                assert!(ex.test_id >= 2);
            }
        }
        ds.validate().unwrap();
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let a = build_small(3, 1);
        let b = build_small(3, 1);
        assert_eq!(a, b);
        let c = build_small(4, 1);
        assert_ne!(a.tags, c.tags, "different seed should reshuffle the val draw");
    }

    #[test]
    fn labels_cover_all_classes_in_every_split() {
        let ds = build_small(5, 2);
        for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Eval] {
            let mut seen = [false; 4];
            for &i in &ds.indices(tag) {
                seen[ds.examples[i].label as usize] = true;
            }
            assert_eq!(seen, [true; 4], "split {tag:?} missing a class");
        }
    }

    #[test]
    fn receiver_groups_are_coherent() {
        let ds = build_small(6, 1);
        let train = ds.receiver_groups(SplitTag::Train);
        assert!(!train.is_empty());
        for g in &train {
            let head = &ds.examples[g[0]];
            for (k, &i) in g.iter().enumerate() {
                let e = &ds.examples[i];
                assert_eq!(e.rx_id as usize, k);
                assert_eq!(e.label, head.label);
                assert_eq!(e.test_id, head.test_id);
                assert_eq!(ds.tags[i], SplitTag::Train);
            }
        }
        // 90 train examples = 22 whole groups + one straddler
        assert_eq!(ds.split_len(SplitTag::Train), 90);
        assert_eq!(train.len(), 22);
        let eval_groups = ds.receiver_groups(SplitTag::Eval);
        assert_eq!(eval_groups.len(), 8, "two eval tests x one snapshot x four refs");
    }

    #[test]
    fn permuted_labels_stay_group_coherent_and_preserve_multiset() {
        let plan = default_plan(&BandLengths::default()).unwrap();
        let channel = sample_mimo_channel(8, &ChannelConfig::default()).unwrap();
        let base = build_dataset(&plan, &channel, &small_cfg(8, 1)).unwrap();
        let permuted = build_dataset(
            &plan,
            &channel,
            &BuildConfig { permute_train_labels: true, ..small_cfg(8, 1) },
        )
        .unwrap();

        let count = |ds: &LabeledDataset, tag| {
            let mut c = [0usize; 4];
            for &i in &ds.indices(tag) {
                c[ds.examples[i].label as usize] += 1;
            }
            c
        };
        let pool_counts = |ds: &LabeledDataset| {
            let t = count(ds, SplitTag::Train);
            let v = count(ds, SplitTag::Val);
            [t[0] + v[0], t[1] + v[1], t[2] + v[2], t[3] + v[3]]
        };
        assert_eq!(pool_counts(&base), pool_counts(&permuted), "label multiset must survive");

        let mut changed = false;
        for (a, b) in base.examples.iter().zip(&permuted.examples) {
            if a.test_id < 2 {
                assert_eq!(a.label, b.label, "eval labels must be untouched");
            } else if a.label != b.label {
                changed = true;
            }
        }
        assert!(changed, "permutation should actually move labels");
        for g in permuted.receiver_groups(SplitTag::Train) {
            let l = permuted.examples[g[0]].label;
            assert!(g.iter().all(|&i| permuted.examples[i].label == l));
        }
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.eacf");
        let ds = build_small(9, 1);
        write_dataset(&path, &ds).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.eacf");
        let ds = build_small(10, 1);
        write_dataset(&path, &ds).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::VersionMismatch(9))));

        std::fs::write(&path, &good[..good.len() - 5]).unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::TruncatedFile)));

        let mut bad = good.clone();
        bad[20 + 4] = 7; // first example's split tag
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_dataset(&path), Err(DatasetError::UnknownSplit(7))));
    }

    #[test]
    fn batch_iterator_covers_split_with_partial_tail() {
        let ds = build_small(11, 1);
        let batches = batch_iterator(&ds, SplitTag::Train, 32, 99);
        let train = ds.split_len(SplitTag::Train);
        assert_eq!(batches.len(), train.div_ceil(32));
        assert_eq!(batches.last().unwrap().len(), train % 32);
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, ds.indices(SplitTag::Train));

        assert_eq!(batch_iterator(&ds, SplitTag::Train, 32, 99), batches);
        assert_ne!(
            batch_iterator(&ds, SplitTag::Train, 32, 100),
            batches,
            "epoch seed must reshuffle"
        );
    }

    #[test]
    fn inactive_plan_yields_empty_dataset_error() {
        let plan = TransmissionPlan {
            tests: vec![crate::sim::TestPlan {
                role: TestRole::Train,
                assignments: vec![Vec::new(); N_TX],
            }],
        };
        let channel = sample_mimo_channel(1, &ChannelConfig::default()).unwrap();
        assert!(matches!(
            build_dataset(&plan, &channel, &small_cfg(1, 1)),
            Err(DatasetError::EmptyDataset)
        ));
    }

    #[test]
    fn drift_hook_changes_later_snapshots() {
        let plan = default_plan(&BandLengths::default()).unwrap();
        let channel = sample_mimo_channel(12, &ChannelConfig::default()).unwrap();
        let static_cfg = BuildConfig { snr_db: None, ..small_cfg(12, 2) };
        let drift_cfg = BuildConfig { drift_per_snapshot: 0.02, ..static_cfg.clone() };
        let a = build_dataset(&plan, &channel, &static_cfg).unwrap();
        let b = build_dataset(&plan, &channel, &drift_cfg).unwrap();
        // snapshot 0 identical, snapshot 1 rotated
        assert_eq!(a.examples[0], b.examples[0]);
        assert_ne!(a.examples[16], b.examples[16]);
    }
}
