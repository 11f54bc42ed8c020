//! Deterministic seeded random streams.
//!
//! The generator is xoshiro256++ seeded through splitmix64, both fixed,
//! published algorithms built entirely from integer arithmetic, so a given
//! seed yields the same draw sequence on every platform. Floating-point
//! derived draws (normal, gamma, beta) only use [`crate::math`] helpers and
//! therefore inherit that reproducibility.

use crate::math;

/// Seeded random stream with a draw counter.
///
/// `draws` counts every call that consumed entropy from the stream, which
/// makes it possible to assert that two code paths consumed the same
/// amount of randomness.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    state: [u64; 4],
    draws: u64,
    // Second output of the last Marsaglia polar round, served next.
    spare_normal: Option<f64>,
}

/// Name of the generator algorithm, recorded in dataset manifests.
pub const ALGORITHM: &str = "xoshiro256++/splitmix64";

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        RngStream {
            seed,
            state,
            draws: 0,
            spare_normal: None,
        }
    }

    /// Derive an independent stream for a sub-task (per-image seeds, per-run
    /// seeds). Mixes the parent seed with the index through splitmix64.
    pub fn derive(&self, index: u64) -> Self {
        let mut sm = self.seed ^ 0xa076_1d64_78bd_642f_u64.wrapping_mul(index.wrapping_add(1));
        RngStream::new(splitmix64(&mut sm))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn draw_count(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        let s = &mut self.state;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Multiply-shift rejection-free mapping; bias is < 2^-64 * n which
        // is irrelevant at the n used here (shape counts, pixel offsets).
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal draw via the Marsaglia polar method.
    ///
    /// The method produces pairs; the second value is cached and returned
    /// by the next call, so the stream stays deterministic.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let scale = math::sqrt(-2.0 * math::ln(s) / s);
                self.spare_normal = Some(v * scale);
                return u * scale;
            }
        }
    }

    /// Gamma(shape, 1) draw.
    ///
    /// Marsaglia–Tsang squeeze for shape >= 1; for shape < 1 the standard
    /// boost Gamma(a) = Gamma(a+1) * U^(1/a) is applied.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        debug_assert!(shape > 0.0);
        if shape < 1.0 {
            let boost = math::pow(self.uniform().max(f64::MIN_POSITIVE), 1.0 / shape);
            return self.gamma(shape + 1.0) * boost;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / math::sqrt(9.0 * d);
        loop {
            let x = self.normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return d * v;
            }
            if u > 0.0 && math::ln(u) < 0.5 * x2 + d * (1.0 - v + math::ln(v)) {
                return d * v;
            }
        }
    }
}
