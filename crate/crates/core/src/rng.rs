//! Seeded pseudo-random numbers with a fixed, documented algorithm.
//!
//! Every random draw in the crate (weight initialization, synthetic
//! scenes, synthetic embeddings, shuffling) goes through [`XorShiftRng`],
//! so generated data is identical across platforms and toolchains.
//!
//! Generator: xorshift64* (Vigna 2014) with shifts (12, 25, 27) and output
//! multiplier `0x2545_F491_4F6C_DD1D`. Seeds are scrambled with one
//! SplitMix64 round (increment `0x9E37_79B9_7F4A_7C15`, multipliers
//! `0xBF58_476D_1CE4_E5B9` and `0x94D0_49BB_1331_11EB`) so that small or
//! adjacent seeds give unrelated streams; a zero state is replaced by the
//! SplitMix64 increment. Doubles take the top 53 bits; normals use the
//! Box-Muller transform without caching the second variate.

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const XORSHIFT_MULTIPLIER: u64 = 0x2545_F491_4F6C_DD1D;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(SPLITMIX_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a, used to turn string keys into seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derive an independent sub-seed for a named stage.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a(label.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct XorShiftRng {
    state: u64,
}

impl XorShiftRng {
    pub fn new(seed: u64) -> Self {
        let state = splitmix64(seed);
        XorShiftRng {
            state: if state == 0 { SPLITMIX_GAMMA } else { state },
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(XORSHIFT_MULTIPLIER)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; the bias for n << 2^64 is negligible here.
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Index drawn proportionally to `weights` (all positive).
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut r = self.next_f64() * total;
        for (i, w) in weights.iter().enumerate() {
            if r < *w {
                return i;
            }
            r -= w;
        }
        weights.len() - 1
    }

    /// Fisher-Yates.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
