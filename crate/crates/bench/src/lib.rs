//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use ham_core::data::{generate, DataConfig};
use ham_core::{Dataset, ParamSet, Tensor};

/// `n` random parameter sets with the given layer sizes.
pub fn random_sets(n: usize, sizes: &[usize], seed: u64) -> Vec<ParamSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let entries = sizes
                .iter()
                .enumerate()
                .map(|(i, &len)| {
                    let v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
                    (format!("l{i}"), Tensor::vector(v).unwrap())
                })
                .collect();
            ParamSet::from_entries(entries).unwrap()
        })
        .collect()
}

/// The default synthetic dataset.
pub fn default_dataset() -> Dataset {
    generate(&DataConfig::default()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_deterministic() {
        assert_eq!(random_sets(2, &[3, 4], 1), random_sets(2, &[3, 4], 1));
        assert_eq!(default_dataset().len(), 2000);
    }
}
