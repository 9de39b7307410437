//! Channel estimation and feature extraction.
//!
//! Six-stage chain per (transmitter reference, receiver) pair:
//! correlate against the known reference (CIR estimate), synchronize and
//! truncate to a fixed tap window, transform to the frequency domain,
//! optionally difference against a designated reference pair, smooth with a
//! causal moving average, then split I/Q planes and normalize each plane to
//! the unit interval. The output planes are what the classifiers consume.

use crate::zc::{linear_cross_correlate_direct, IQBuffer, ZcError};
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ChanestError {
    #[error("reference ({reference}) longer than received ({received})")]
    ReferenceTooLong { reference: usize, received: usize },
    /// Correlation magnitude never rose above the sync threshold.
    #[error("input is all zero (peak {peak:.3e} below threshold {threshold:.3e})")]
    AllZeroInput { peak: f64, threshold: f64 },
    #[error("FFT size {n_fft} invalid for input length {input_len} (need power of two >= input)")]
    BadFftSize { n_fft: usize, input_len: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("window length must be >= 1")]
    ZeroWindow,
    #[error("debug dump failed: {0}")]
    DumpIo(String),
}

impl From<ZcError> for ChanestError {
    fn from(e: ZcError) -> Self {
        match e {
            ZcError::ReferenceTooLong { reference, received } => {
                ChanestError::ReferenceTooLong { reference, received }
            }
            other => panic!("unexpected correlation error: {other}"),
        }
    }
}

/// Synchronized, truncated channel impulse response estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct CirEstimate {
    /// `l_cir` complex taps; index 0 is the strongest correlation peak.
    pub taps: Vec<Complex64>,
    /// Correlation lag the window was anchored at.
    pub sync_offset: usize,
    /// Peak magnitude over mean magnitude of the full correlation; >= 1.
    pub peak_to_mean: f64,
}

/// Frequency-domain view of a CIR estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct TfEstimate {
    pub bins: Vec<Complex64>,
}

/// Which plane pairs a feature carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneSet {
    /// CIR I/Q followed by TF I/Q (four planes).
    Both,
    CirOnly,
    TfOnly,
}

/// Differencing applied in the frequency domain before smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffMode {
    Off,
    /// `tf * conj(tf_ref)`
    ConjProduct,
    /// `tf / (tf_ref + delta)`
    Ratio,
}

/// Feature-extraction knobs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Taps kept after synchronization.
    pub l_cir: usize,
    /// FFT size for the frequency-domain planes (power of two, >= l_cir).
    pub n_fft: usize,
    /// Causal moving-average window applied to the frequency-domain sequence.
    pub ma_window: usize,
    pub diff_mode: DiffMode,
    /// (tx, rx) whose frequency response is the differencing reference.
    pub diff_reference: (u8, u8),
    /// Denominator guard for `DiffMode::Ratio`.
    pub ratio_delta: f64,
    /// Correlation peaks below this magnitude count as all-zero input.
    pub eps_sync: f64,
    pub planes: PlaneSet,
    /// When set, every intermediate stage is dumped as interleaved f32 I/Q.
    pub debug_dump_dir: Option<PathBuf>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            l_cir: 128,
            n_fft: 256,
            ma_window: 4,
            diff_mode: DiffMode::Off,
            diff_reference: (0, 0),
            ratio_delta: 1e-6,
            eps_sync: 1e-12,
            planes: PlaneSet::Both,
            debug_dump_dir: None,
        }
    }
}

impl FeatureConfig {
    pub fn n_planes(&self) -> usize {
        match self.planes {
            PlaneSet::Both => 4,
            PlaneSet::CirOnly | PlaneSet::TfOnly => 2,
        }
    }

    /// All planes share the FFT length; CIR planes are zero-padded up to it.
    pub fn plane_len(&self) -> usize {
        self.n_fft
    }

    pub fn validate(&self) -> Result<(), ChanestError> {
        if self.l_cir == 0 || self.ma_window == 0 {
            return Err(ChanestError::ZeroWindow);
        }
        if !self.n_fft.is_power_of_two() || self.n_fft < self.l_cir {
            return Err(ChanestError::BadFftSize { n_fft: self.n_fft, input_len: self.l_cir });
        }
        Ok(())
    }
}

/// One extracted feature: normalized planes plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelFeature {
    pub tx: u8,
    pub rx: u8,
    pub test_id: u16,
    /// `n_planes` rows of `plane_len` values, each normalized to [0, 1].
    pub planes: Vec<Vec<f32>>,
}

/// Result of running extraction over every (reference, receiver) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub features: Vec<ChannelFeature>,
    /// Pairs dropped because their correlation never cleared `eps_sync`.
    pub skipped: usize,
}

/// Raw CIR estimate: linear cross-correlation of `received` against
/// `reference`, scaled by `1/N`.
///
/// Evaluated by direct summation so that the repeated correlation peaks of a
/// periodic sounding are bit-identical and the earliest-peak tie rule in
/// [`sync_truncate`] is stable. A unit-gain single-path channel yields a unit
/// peak.
pub fn estimate_cir(
    received: &[Complex64],
    reference: &[Complex64],
) -> Result<Vec<Complex64>, ChanestError> {
    let corr = linear_cross_correlate_direct(received, reference)?;
    let scale = 1.0 / reference.len() as f64;
    Ok(corr.into_iter().map(|v| v * scale).collect())
}

/// Anchor a window of `l_cir` taps at the strongest correlation magnitude
/// (ties resolve to the smallest lag) and zero-pad past the end.
///
/// A sounding repeated every `period` samples repeats its correlation peak
/// every `period` lags, and receiver noise decides which copy is largest. The
/// copies are equivalent, but a late one can leave fewer than `l_cir` lags
/// before the buffer ends, so the peak is folded into the first period before
/// the window is cut. Pass the reference length as `period`; a period no
/// shorter than the correlation leaves the peak where it was found.
pub fn sync_truncate(
    corr: &[Complex64],
    period: usize,
    l_cir: usize,
    eps_sync: f64,
) -> Result<CirEstimate, ChanestError> {
    if l_cir == 0 || period == 0 {
        return Err(ChanestError::ZeroWindow);
    }
    let mut best = 0usize;
    let mut best_mag = f64::NEG_INFINITY;
    let mut mag_sum = 0.0;
    for (i, v) in corr.iter().enumerate() {
        let m = v.norm();
        mag_sum += m;
        if m > best_mag {
            best_mag = m;
            best = i;
        }
    }
    if corr.is_empty() || best_mag < eps_sync {
        return Err(ChanestError::AllZeroInput { peak: best_mag.max(0.0), threshold: eps_sync });
    }
    let anchor = best % period;
    let mut taps = vec![Complex64::new(0.0, 0.0); l_cir];
    let avail = corr.len() - anchor;
    let take = avail.min(l_cir);
    taps[..take].copy_from_slice(&corr[anchor..anchor + take]);
    let mean_mag = mag_sum / corr.len() as f64;
    Ok(CirEstimate { taps, sync_offset: anchor, peak_to_mean: best_mag / mean_mag })
}

/// Forward DFT of the zero-padded CIR. `n_fft` must be a power of two and at
/// least the input length; unnormalized, so Parseval reads
/// `sum |x|^2 = (1/n_fft) sum |X|^2`.
pub fn cir_to_tf(cir: &[Complex64], n_fft: usize) -> Result<TfEstimate, ChanestError> {
    if !n_fft.is_power_of_two() || n_fft < cir.len() || n_fft == 0 {
        return Err(ChanestError::BadFftSize { n_fft, input_len: cir.len() });
    }
    let mut bins = vec![Complex64::new(0.0, 0.0); n_fft];
    bins[..cir.len()].copy_from_slice(cir);
    FftPlanner::new().plan_fft_forward(n_fft).process(&mut bins);
    Ok(TfEstimate { bins })
}

/// Frequency-domain differencing of one response against a reference response.
pub fn channel_difference(
    tf: &[Complex64],
    tf_ref: &[Complex64],
    mode: DiffMode,
    ratio_delta: f64,
) -> Result<Vec<Complex64>, ChanestError> {
    if tf.len() != tf_ref.len() {
        return Err(ChanestError::LengthMismatch(tf.len(), tf_ref.len()));
    }
    Ok(match mode {
        DiffMode::Off => tf.to_vec(),
        DiffMode::ConjProduct => tf.iter().zip(tf_ref).map(|(a, b)| a * b.conj()).collect(),
        DiffMode::Ratio => tf
            .iter()
            .zip(tf_ref)
            .map(|(a, b)| a / (b + Complex64::new(ratio_delta, 0.0)))
            .collect(),
    })
}

/// Causal moving average: `out[i]` is the mean of the last `window` samples
/// ending at `i` (fewer at the start).
pub fn moving_average(seq: &[Complex64], window: usize) -> Result<Vec<Complex64>, ChanestError> {
    if window == 0 {
        return Err(ChanestError::ZeroWindow);
    }
    let mut out = Vec::with_capacity(seq.len());
    for i in 0..seq.len() {
        let lo = (i + 1).saturating_sub(window);
        let count = i + 1 - lo;
        let sum: Complex64 = seq[lo..=i].iter().sum();
        out.push(sum / count as f64);
    }
    Ok(out)
}

/// Affinely map values onto [0, 1]; a constant input maps to all zeros.
pub fn normalize_unit_interval(vals: &[f64]) -> Vec<f64> {
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if vals.is_empty() || max == min {
        return vec![0.0; vals.len()];
    }
    let span = max - min;
    vals.iter().map(|v| (v - min) / span).collect()
}

fn normalized_plane_f32(vals: &[f64]) -> Vec<f32> {
    normalize_unit_interval(vals).into_iter().map(|v| v as f32).collect()
}

/// Dump complex samples as little-endian interleaved f32 I/Q.
pub fn dump_iq(path: &Path, data: &[Complex64]) -> Result<(), ChanestError> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for s in data {
        bytes.extend_from_slice(&(s.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(s.im as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| ChanestError::DumpIo(e.to_string()))?;
    f.write_all(&bytes).map_err(|e| ChanestError::DumpIo(e.to_string()))
}

struct PairIntermediate {
    tx: u8,
    rx: u8,
    cir: CirEstimate,
    tf: TfEstimate,
}

/// Run the full chain for every (reference, receiver) pair of one snapshot.
///
/// `references` lists `(tx, sequence)` in the order features should be
/// emitted; receivers iterate fastest. Pairs whose correlation stays below
/// `eps_sync` are skipped and counted, not fatal.
pub fn extract_features(
    received: &[IQBuffer],
    references: &[(usize, IQBuffer)],
    test_id: u16,
    cfg: &FeatureConfig,
) -> Result<Extraction, ChanestError> {
    cfg.validate()?;
    let mut stage1 = Vec::with_capacity(references.len() * received.len());
    let mut skipped = 0usize;
    for (tx, reference) in references {
        for (rx, buf) in received.iter().enumerate() {
            let corr = estimate_cir(&buf.samples, &reference.samples)?;
            let cir = match sync_truncate(&corr, reference.len(), cfg.l_cir, cfg.eps_sync) {
                Ok(c) => c,
                Err(ChanestError::AllZeroInput { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let tf = cir_to_tf(&cir.taps, cfg.n_fft)?;
            if let Some(dir) = &cfg.debug_dump_dir {
                let stem = format!("t{test_id}_tx{tx}_rx{rx}");
                dump_iq(&dir.join(format!("{stem}_corr.iq")), &corr)?;
                dump_iq(&dir.join(format!("{stem}_cir.iq")), &cir.taps)?;
                dump_iq(&dir.join(format!("{stem}_tf.iq")), &tf.bins)?;
            }
            stage1.push(PairIntermediate { tx: *tx as u8, rx: rx as u8, cir, tf });
        }
    }

    let diff_tf: Option<Vec<Complex64>> = match cfg.diff_mode {
        DiffMode::Off => None,
        _ => stage1
            .iter()
            .find(|p| (p.tx, p.rx) == cfg.diff_reference)
            .map(|p| p.tf.bins.clone()),
    };
    if cfg.diff_mode != DiffMode::Off && diff_tf.is_none() {
        // The designated reference pair produced nothing; no feature can be
        // differenced, so the whole snapshot is skipped.
        return Ok(Extraction { features: Vec::new(), skipped: skipped + stage1.len() });
    }

    let mut features = Vec::with_capacity(stage1.len());
    for pair in &stage1 {
        let tf = match &diff_tf {
            Some(r) => channel_difference(&pair.tf.bins, r, cfg.diff_mode, cfg.ratio_delta)?,
            None => pair.tf.bins.clone(),
        };
        let tf_smooth = moving_average(&tf, cfg.ma_window)?;

        let mut planes = Vec::with_capacity(cfg.n_planes());
        if cfg.planes != PlaneSet::TfOnly {
            let mut i_vals = vec![0.0f64; cfg.plane_len()];
            let mut q_vals = vec![0.0f64; cfg.plane_len()];
            for (k, t) in pair.cir.taps.iter().enumerate() {
                i_vals[k] = t.re;
                q_vals[k] = t.im;
            }
            planes.push(normalized_plane_f32(&i_vals));
            planes.push(normalized_plane_f32(&q_vals));
        }
        if cfg.planes != PlaneSet::CirOnly {
            let i_vals: Vec<f64> = tf_smooth.iter().map(|v| v.re).collect();
            let q_vals: Vec<f64> = tf_smooth.iter().map(|v| v.im).collect();
            planes.push(normalized_plane_f32(&i_vals));
            planes.push(normalized_plane_f32(&q_vals));
        }
        features.push(ChannelFeature { tx: pair.tx, rx: pair.rx, test_id, planes });
    }
    Ok(Extraction { features, skipped })
}
