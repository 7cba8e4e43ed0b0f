//! Deterministic counter-based random number generation.
//!
//! Every stream is a pure function of `(seed, counter)`: draw `i` is
//! `mix64(seed + i * 0x9E3779B97F4A7C15)` with the SplitMix64 finalizer as
//! `mix64`. Substreams are derived by hashing a label into a fresh seed, so
//! components (data generation, init, dropout, masks) never share or race a
//! stream, and reordering one component's draws cannot perturb another's.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline(always)]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; used only for substream derivation.
fn hash_label(label: &str) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in label.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Counter-based RNG with O(1) substream derivation.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    /// Derives an independent stream for a named component. Does not consume
    /// state from `self`, so derivation order never affects parent draws.
    pub fn derive(&self, label: &str) -> Rng {
        Rng::new(mix64(self.seed ^ hash_label(label)))
    }

    /// Derives an independent stream for an indexed item (sample, epoch, ...).
    pub fn derive_index(&self, index: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(index.wrapping_add(1).wrapping_mul(GOLDEN))))
    }

    pub fn next_u64(&mut self) -> u64 {
        let x = self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN));
        self.counter = self.counter.wrapping_add(1);
        mix64(x)
    }

    /// Uniform draw in `[0, 1)` with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw via the Marsaglia polar method. Rejected pairs are
    /// discarded, so one call consumes a variable (even) number of counter
    /// steps; the sequence is still fully determined by `(seed, counter)`.
    pub fn next_normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Unbiased uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
