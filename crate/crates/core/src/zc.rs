//! Zadoff-Chu reference sequences and correlation primitives.
//!
//! Zadoff-Chu (ZC) sequences are constant-amplitude, zero-periodic-autocorrelation
//! waveforms: `x[n] = exp(-j pi u n (n+1+2q) / N)` for odd length `N`, root `u`
//! coprime with `N`, and cyclic shift `q`. A receiver correlating against a known
//! ZC reference sees the channel impulse response directly, which is what the rest
//! of the pipeline feeds on.

use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

/// Nominal front-end sample rate attached to generated buffers (metadata only).
pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 25.0e6;

#[derive(Debug, Error, PartialEq)]
pub enum ZcError {
    /// Root must satisfy `0 < u < N` and `gcd(u, N) = 1`.
    #[error("invalid ZC root {root} for length {length}")]
    InvalidRoot { root: u32, length: u32 },
    /// The closed form used here requires odd sequence length.
    #[error("ZC length {0} is even; only odd lengths are supported")]
    EvenLength(u32),
    /// Autocorrelation lag outside `[0, N)`.
    #[error("lag {lag} out of range for length {length}")]
    LagOutOfRange { lag: usize, length: usize },
    /// Operands of a circular correlation must have equal nonzero length.
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    /// Linear correlation needs the reference to fit inside the received buffer.
    #[error("reference ({reference}) longer than received ({received})")]
    ReferenceTooLong { reference: usize, received: usize },
}

/// Complex baseband samples plus sample-rate metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct IQBuffer {
    pub samples: Vec<Complex64>,
    pub sample_rate_hz: f64,
}

impl IQBuffer {
    pub fn new(samples: Vec<Complex64>) -> Self {
        Self { samples, sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parameters of one Zadoff-Chu sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ZcParams {
    /// Root index `u`, `0 < u < length`, coprime with `length`.
    pub root: u32,
    /// Odd sequence length `N`.
    pub length: u32,
    /// Cyclic shift `q` (0 for the plain sequence).
    pub cyclic_shift: u32,
}

impl ZcParams {
    pub fn new(root: u32, length: u32) -> Self {
        Self { root, length, cyclic_shift: 0 }
    }

    pub fn validate(&self) -> Result<(), ZcError> {
        if self.length % 2 == 0 {
            return Err(ZcError::EvenLength(self.length));
        }
        if self.root == 0 || self.root >= self.length || gcd(self.root as u64, self.length as u64) != 1 {
            return Err(ZcError::InvalidRoot { root: self.root, length: self.length });
        }
        Ok(())
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Generate the ZC sequence `x[n] = exp(-j pi u n (n+1+2q) / N)`.
///
/// The phase exponent is reduced modulo `2N` in integer arithmetic before the
/// float multiply, so the trig argument stays in `[-2pi, 0]` and the samples
/// keep full double precision even for long sequences.
pub fn zc_sequence(params: &ZcParams) -> Result<IQBuffer, ZcError> {
    params.validate()?;
    let n_len = params.length as u128;
    let u = params.root as u128;
    let q = params.cyclic_shift as u128;
    let two_n = 2 * n_len;
    let samples = (0..params.length as u128)
        .map(|n| {
            let e = (u * n % two_n) * ((n + 1 + 2 * q) % two_n) % two_n;
            let phase = -std::f64::consts::PI * e as f64 / n_len as f64;
            Complex64::from_polar(1.0, phase)
        })
        .collect();
    Ok(IQBuffer::new(samples))
}

/// Periodic autocorrelation `R[lag] = sum_n x[n] * conj(x[(n+lag) mod N])`.
///
/// Direct O(N) sum; for a valid ZC sequence `|R[lag]| = 0` at every nonzero lag
/// and `R[0] = N`.
pub fn periodic_autocorrelation(seq: &[Complex64], lag: usize) -> Result<Complex64, ZcError> {
    let n = seq.len();
    if lag >= n {
        return Err(ZcError::LagOutOfRange { lag, length: n });
    }
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..n {
        let j = if i + lag >= n { i + lag - n } else { i + lag };
        acc += seq[i] * seq[j].conj();
    }
    Ok(acc)
}

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// FFT of `data` zero-padded to `size` (forward or inverse).
fn fft_padded(data: &[Complex64], size: usize, inverse: bool) -> Vec<Complex64> {
    let mut planner = FftPlanner::new();
    let fft = if inverse { planner.plan_fft_inverse(size) } else { planner.plan_fft_forward(size) };
    let mut buf = vec![Complex64::new(0.0, 0.0); size];
    buf[..data.len()].copy_from_slice(data);
    fft.process(&mut buf);
    buf
}

/// Circular cross-correlation `c[tau] = sum_n a[n] * conj(b[(n - tau) mod N])`.
///
/// Computed by forward transform, conjugate product, and inverse transform on a
/// next-power-of-two grid (padded past `2N-1` so no wrap-around aliases in),
/// then folded back to one period.
pub fn circular_cross_correlate(a: &[Complex64], b: &[Complex64]) -> Result<Vec<Complex64>, ZcError> {
    let n = a.len();
    if n == 0 || n != b.len() {
        return Err(ZcError::LengthMismatch(a.len(), b.len()));
    }
    let p = next_pow2(2 * n - 1);
    let fa = fft_padded(a, p, false);
    let fb = fft_padded(b, p, false);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    let z = fft_padded(&prod, p, true);
    let scale = 1.0 / p as f64;
    let mut out = Vec::with_capacity(n);
    out.push(z[0] * scale);
    for tau in 1..n {
        // positive lag plus the wrapped negative lag tau - N
        out.push((z[tau] + z[p - n + tau]) * scale);
    }
    Ok(out)
}

/// Full linear cross-correlation of `received` against `reference`:
/// `out[tau] = sum_j received[tau + j] * conj(reference[j])`,
/// `tau = 0 .. len(received) - len(reference)`.
///
/// FFT-accelerated on a next-power-of-two grid; matches the direct sum to
/// floating-point accuracy.
pub fn linear_cross_correlate(
    received: &[Complex64],
    reference: &[Complex64],
) -> Result<Vec<Complex64>, ZcError> {
    let nr = received.len();
    let nf = reference.len();
    if nf == 0 || nf > nr {
        return Err(ZcError::ReferenceTooLong { reference: nf, received: nr });
    }
    let p = next_pow2(nr);
    let fa = fft_padded(received, p, false);
    let fb = fft_padded(reference, p, false);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    let z = fft_padded(&prod, p, true);
    let scale = 1.0 / p as f64;
    Ok(z[..nr - nf + 1].iter().map(|v| v * scale).collect())
}

/// Direct O(N^2) linear cross-correlation; reference implementation for tests
/// and for callers that need bit-stable summation order across lags.
pub fn linear_cross_correlate_direct(
    received: &[Complex64],
    reference: &[Complex64],
) -> Result<Vec<Complex64>, ZcError> {
    let nr = received.len();
    let nf = reference.len();
    if nf == 0 || nf > nr {
        return Err(ZcError::ReferenceTooLong { reference: nf, received: nr });
    }
    let out = (0..=nr - nf)
        .map(|tau| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, r) in reference.iter().enumerate() {
                acc += received[tau + j] * r.conj();
            }
            acc
        })
        .collect();
    Ok(out)
}
