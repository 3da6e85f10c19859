//! Seeding helpers. Every random stream is an explicit `ChaCha8Rng`.

use rand::{Rng, SeedableRng};
pub use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer, used to mix seed components.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a master seed and a path of indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(mix64(master), |acc, &i| mix64(acc ^ mix64(i)))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw an index from a probability vector by inversion.
pub fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off: fall back to the last index with positive mass.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// A random point of the probability simplex (flat Dirichlet).
pub fn simplex_point<R: Rng + ?Sized>(rng: &mut R, n: usize) -> alloc::vec::Vec<f64> {
    let mut v: alloc::vec::Vec<f64> = (0..n)
        .map(|_| -crate::math::ln(1.0 - rng.random::<f64>()))
        .collect();
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_path() {
        let a = derive_seed(1, &[0, 1]);
        let b = derive_seed(1, &[1, 0]);
        assert_ne!(a, b);
        assert_eq!(a, derive_seed(1, &[0, 1]));
    }

    #[test]
    fn categorical_respects_zero_mass() {
        let mut rng = rng_from_seed(3);
        for _ in 0..1000 {
            assert_eq!(categorical(&mut rng, &[0.0, 1.0, 0.0]), 1);
        }
    }
}
