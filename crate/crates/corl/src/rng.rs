//! Seeded randomness.
//!
//! All stochastic code in this crate draws from ChaCha8, a counter-based
//! stream cipher RNG. Independent streams are derived from `(seed, stream)`
//! pairs, so parallel consumers (e.g. evaluation tasks) stay reproducible
//! regardless of scheduling order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub type Rng = ChaCha8Rng;

/// Root generator for a seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent generator for `(seed, stream)`. Streams never overlap.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw from `[0, 1)` with 53 bits of precision.
pub fn uniform(rng: &mut Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut Rng) -> f64 {
    // u must be strictly positive for the log.
    let mut u = uniform(rng);
    while u == 0.0 {
        u = uniform(rng);
    }
    let v = uniform(rng);
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

/// Uniform integer in `[0, bound)` via rejection sampling (unbiased).
pub fn below(rng: &mut Rng, bound: usize) -> usize {
    assert!(bound > 0, "below: empty range");
    let bound = bound as u64;
    let zone = u64::MAX - (u64::MAX - bound + 1) % bound;
    loop {
        let x = rng.next_u64();
        if x <= zone {
            return (x % bound) as usize;
        }
    }
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// `k` distinct indices from `0..n`, in draw order.
pub fn sample_indices(rng: &mut Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "sample_indices: k > n");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + below(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: Vec<u64> = (0..4).map(|_| stream(7, 0).next_u64()).collect();
        let b: Vec<u64> = (0..4).map(|_| stream(7, 1).next_u64()).collect();
        assert_eq!(a[0], a[1]);
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn below_is_in_range() {
        let mut rng = seeded(0);
        for _ in 0..1000 {
            assert!(below(&mut rng, 7) < 7);
        }
    }

    #[test]
    fn uniform_is_in_unit_interval() {
        let mut rng = seeded(1);
        for _ in 0..1000 {
            let x = uniform(&mut rng);
            assert!((0.0..1.0).contains(&x));
        }
    }
}
