//! Seeded random measures for tests, benchmarks and the `gen` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::measures::DiscreteMeasure;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` atoms uniform in the box `[lo, hi]^dim`, weights uniform in
/// `[0.5, 1.5]` rescaled to total `mass`.
pub fn random_measure<R: Rng>(
    rng: &mut R,
    n: usize,
    dim: usize,
    mass: f64,
    lo: f64,
    hi: f64,
) -> Result<DiscreteMeasure> {
    let mut w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x *= mass / s);
    let coords = (0..n * dim).map(|_| rng.gen_range(lo..hi)).collect();
    DiscreteMeasure::from_flat(w, dim, coords)
}

/// `n` atoms of equal weight `mass / n`, uniform in `[lo, hi]^dim`.
pub fn uniform_cloud<R: Rng>(
    rng: &mut R,
    n: usize,
    dim: usize,
    mass: f64,
    lo: f64,
    hi: f64,
) -> Result<DiscreteMeasure> {
    let coords = (0..n * dim).map(|_| rng.gen_range(lo..hi)).collect();
    DiscreteMeasure::from_flat(vec![mass / n as f64; n], dim, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = random_measure(&mut rng(7), 5, 2, 3.0, 0.0, 1.0).unwrap();
        let b = random_measure(&mut rng(7), 5, 2, 3.0, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!((a.total_mass() - 3.0).abs() < 1e-14);
        assert!(a.coords().iter().all(|x| (0.0..1.0).contains(x)));
    }
}
