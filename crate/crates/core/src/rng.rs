//! Counter-based deterministic random number generator.
//!
//! Every stochastic decision in the engine (weight init, gate sampling,
//! shuffling, synthetic data) draws from this generator so that a run is a
//! pure function of its seed. The generator is the SplitMix64 sequence: the
//! i-th output is `mix64(seed + i * GOLDEN)`, which makes the state a plain
//! counter that serializes into checkpoints as a single u64. Independent
//! streams are derived by folding tag words into the seed with the same
//! finalizer, so derived streams never overlap by construction of the mix.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seedable, splittable counter-based generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng64 {
    state: u64,
}

impl Rng64 {
    pub fn new(seed: u64) -> Rng64 {
        Rng64 { state: seed }
    }

    /// Derive an independent stream from a seed and a path of tag words.
    /// `derive(s, &[a, b])` and `derive(s, &[a, c])` are unrelated streams.
    pub fn derive(seed: u64, path: &[u64]) -> Rng64 {
        let mut s = seed;
        for &tag in path {
            s = mix64(s ^ tag.wrapping_mul(GOLDEN).wrapping_add(GOLDEN));
        }
        Rng64 { state: s }
    }

    /// Raw counter state, for checkpointing.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn from_state(state: u64) -> Rng64 {
        Rng64 { state }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n) via widening multiply.
    #[inline]
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        lo + self.next_below(hi - lo + 1)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
