//! Portable counter-based RNG used for every stochastic choice in the crate.
//!
//! The generator is SplitMix64: a 64-bit counter advanced by the golden-ratio
//! increment, finalized with two xor-multiply rounds. It is trivially
//! reimplementable in any language, which is what makes splits, augmentations
//! and weight initialization reproducible across runs and platforms.
//!
//! Derivations pinned here and relied on by the rest of the crate:
//! - `uniform` maps the top 53 bits to `[0, 1)`.
//! - `normal` is Box-Muller on two uniforms (`u1` shifted away from zero).
//! - `trunc_normal` rejects draws outside two standard deviations.
//! - `below` uses rejection to stay unbiased.
//! - `fork`/`fork_path` derive independent streams from a label so the
//!   consuming order of sibling streams cannot perturb each other.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer from the SplitMix64 reference implementation.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over bytes; used to turn parameter paths into fork labels.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Child stream keyed by `label`; independent of draws taken from `self`.
    pub fn fork(&self, label: u64) -> Self {
        Self::new(mix64(self.state ^ mix64(label ^ GOLDEN_GAMMA)))
    }

    /// Child stream keyed by a string label (parameter path, dataset name...).
    pub fn fork_path(&self, path: &str) -> Self {
        self.fork(hash_str(path))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased draw in `[0, n)` via rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let u1 = (1.0 - u1).max(f64::MIN_POSITIVE); // keep log argument in (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal(0, std) truncated to two standard deviations.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// In-place Fisher-Yates.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
