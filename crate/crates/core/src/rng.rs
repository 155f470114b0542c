//! Portable seeded PRNG.
//!
//! The generator is xorshift64* (Vigna 2016) with the shift triple
//! `(12, 25, 27)` and output multiplier `0x2545F4914F6CDD1D`. Seeds are
//! expanded through one SplitMix64 step (increment `0x9E3779B97F4A7C15`,
//! multipliers `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`, shifts
//! `30, 27, 31`) so that small or adjacent seeds give unrelated streams and
//! the state is never zero.
//!
//! Derived quantities are defined bit-for-bit so other implementations can
//! reproduce the same streams:
//! - `next_f64`: top 53 bits of `next_u64`, times `2^-53`, in `[0, 1)`.
//! - `below(n)`: rejection sampling on `next_u64` against the largest
//!   multiple of `n` that fits in 64 bits, then `% n`.

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const XORSHIFT_MULT: u64 = 0x2545_F491_4F6C_DD1D;

/// One SplitMix64 output for `state + GAMMA`.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a base seed with a stream label into a new seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct XorShift64Star {
    state: u64,
}

impl XorShift64Star {
    pub fn new(seed: u64) -> Self {
        let state = splitmix64(seed);
        Self {
            state: if state == 0 { SPLITMIX_GAMMA } else { state },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(XORSHIFT_MULT)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`.
    ///
    /// # Panics
    /// If `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return v % n;
            }
        }
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as u64) as usize
    }

    /// Draws `k` distinct elements uniformly without replacement using a
    /// partial Fisher–Yates pass over a copy of `pool`. Returns them in
    /// draw order.
    pub fn sample_without_replacement<T: Copy>(&mut self, pool: &[T], k: usize) -> Vec<T> {
        let mut items = pool.to_vec();
        let k = k.min(items.len());
        for n in 0..k {
            let pick = n + self.below((items.len() - n) as u64) as usize;
            items.swap(n, pick);
        }
        items.truncate(k);
        items
    }
}
