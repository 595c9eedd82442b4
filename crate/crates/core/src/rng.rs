//! Seeded randomness. Every stochastic component (init, dropout, walks,
//! sampling decoders, shuffles) draws from a `SeededRng` owned by its caller,
//! so a fixed seed reproduces a run exactly. ChaCha8 is counter based: child
//! generators derived for independent purposes (one per sampled path, one per
//! training run) stay decoupled from draw order elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child generator on an independent stream. Draws from the child do not
    /// disturb this generator, and distinct `stream` values are decoupled.
    pub fn derive(&self, stream: u64) -> Self {
        let mut child = self.inner.clone();
        child.set_stream(stream);
        child.set_word_pos(0);
        SeededRng { inner: child }
    }

    /// Uniform draw from [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer from [0, n). Panics if n == 0.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.gen_range(0..n)
    }

    /// Uniform integer from [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi, "empty range");
        self.inner.gen_range(lo..=hi)
    }

    /// Standard normal via Box-Muller; two uniforms per draw, no caching, so
    /// the stream position is a pure function of the number of calls.
    pub fn normal(&mut self) -> f64 {
        let u1: f64 = self.inner.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = self.inner.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            xs.swap(i, j);
        }
    }

    /// Index draw from an unnormalized nonnegative weight vector.
    /// Panics if the total mass is not positive and finite.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        assert!(
            total > 0.0 && total.is_finite(),
            "categorical weights must have positive finite mass"
        );
        let mut t = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            t -= w;
            if t < 0.0 {
                return i;
            }
        }
        // Rounding can leave t barely nonnegative; fall back to the last
        // index with positive weight.
        weights
            .iter()
            .rposition(|&w| w > 0.0)
            .expect("positive total implies a positive weight")
    }
}
