//! Seeded, platform-independent random stream.
//!
//! The generator is xoshiro256** seeded through splitmix64, both pure
//! integer algorithms, so a given seed yields the same sequence on every
//! platform. Every source of randomness in the system is a sub-stream
//! derived from one experiment seed and a string label (plus an optional
//! index), which keeps runs reproducible and lets parallel consumers draw
//! independently.

/// splitmix64 step; used for seeding and label mixing.
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string; maps sub-stream labels to mixing keys.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF29CE484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    h
}

/// A deterministic xoshiro256** stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    s: [u64; 4],
    gauss_spare: Option<f64>,
}

impl RngStream {
    /// Stream for a bare seed.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for w in s.iter_mut() {
            *w = splitmix64(&mut sm);
        }
        // xoshiro's all-zero state is degenerate; splitmix64 of any seed
        // cannot produce four zero words, but guard anyway.
        if s == [0, 0, 0, 0] {
            s[0] = 1;
        }
        RngStream {
            s,
            gauss_spare: None,
        }
    }

    /// Sub-stream derived from (seed, label). Distinct labels give
    /// independent sequences.
    pub fn labeled(seed: u64, label: &str) -> Self {
        Self::new(seed ^ fnv1a64(label.as_bytes()).wrapping_mul(0x9E3779B97F4A7C15))
    }

    /// Sub-stream derived from (seed, label, index), e.g. one per image.
    pub fn indexed(seed: u64, label: &str, index: u64) -> Self {
        let h = fnv1a64(label.as_bytes());
        Self::new(
            seed ^ h.wrapping_mul(0x9E3779B97F4A7C15)
                ^ index
                    .wrapping_add(0x632BE59BD9B4E019)
                    .wrapping_mul(0xD1342543DE82EF95),
        )
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform f64 in [0, 1), 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform f64 in [lo, hi).
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Unbiased uniform integer in [0, n). Panics if n = 0.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; the sine mate of each pair is cached.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.gauss_spare.take() {
            return z;
        }
        // u1 in (0, 1] so ln(u1) is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 1.0) * (1.0 / 9007199254740992.0);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.below(i + 1);
            slice.swap(i, j);
        }
    }
}
