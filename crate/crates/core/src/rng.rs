//! Deterministic, platform-independent random generation.
//!
//! Everything that draws randomness in this crate goes through [`SeededRng`],
//! a splitmix64 generator. Equal seeds give bit-identical streams on every
//! platform, and child generators are derived by hashing the parent seed with
//! a tag, so independent pipeline stages can be rerun in isolation without
//! perturbing each other's streams.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded counter-based generator with child-stream splitting.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    state: u64,
    cached_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            state: seed,
            cached_normal: None,
        }
    }

    /// The seed this generator was constructed with (not the current state).
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator for a named stage. Derived from the parent *seed*, so
    /// the child stream does not depend on how much of the parent stream has
    /// been consumed.
    pub fn child(&self, tag: &str) -> SeededRng {
        let mut h = self.seed ^ GOLDEN_GAMMA;
        for &b in tag.as_bytes() {
            h = splitmix64(&mut h) ^ u64::from(b);
        }
        SeededRng::new(splitmix64(&mut h))
    }

    /// Child generator for a numbered worker or item.
    pub fn child_idx(&self, idx: u64) -> SeededRng {
        let mut h = self.seed ^ idx.wrapping_mul(GOLDEN_GAMMA) ^ 0x1234_5678_9abc_def0;
        SeededRng::new(splitmix64(&mut h))
    }

    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal draw (Box-Muller; the paired value is cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.cached_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Isotropic Gaussian draw centered on `mean` with per-coordinate standard
/// deviation `sigma`. `sigma = 0` returns the mean exactly.
pub fn gaussian_sample(rng: &mut SeededRng, mean: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        // Still consume the draws so the stream position is independent of
        // sigma, then return the mean bit-exactly.
        for _ in mean {
            rng.normal();
        }
        return mean.to_vec();
    }
    mean.iter().map(|&m| m + sigma * rng.normal()).collect()
}
