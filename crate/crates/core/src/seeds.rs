//! Deterministic sub-seed derivation.
//!
//! Every stochastic stage (channel draw, noise, split shuffle, weight init,
//! batch order) derives its own seed from the experiment root seed plus a
//! fixed label path, so one `u64` pins the entire run.

/// SplitMix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `root` and an ordered list of labels.
///
/// Distinct label paths give statistically independent streams; the same
/// path always gives the same seed.
pub fn derive(root: u64, labels: &[u64]) -> u64 {
    let mut s = splitmix64(root ^ 0x5bf0_3635_16f5_63b1);
    for &l in labels {
        s = splitmix64(s ^ splitmix64(l));
    }
    s
}
