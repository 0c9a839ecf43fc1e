//! Square-root balanced dataset sampler.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CromeError, Result};

/// `p_d = sqrt(N_d) / sum_i sqrt(N_i)`.
pub fn balanced_probabilities(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(CromeError::Contract("balanced sampler needs at least one dataset".into()));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(CromeError::Contract(format!("dataset {i} has size 0")));
    }
    let roots: Vec<f64> = sizes.iter().map(|&n| (n as f64).sqrt()).collect();
    let total: f64 = roots.iter().sum();
    Ok(roots.iter().map(|r| r / total).collect())
}

fn exact_sqrt(n: u64) -> Option<u64> {
    let r = (n as f64).sqrt().round() as u64;
    (r.checked_mul(r) == Some(n)).then_some(r)
}

/// Probabilities as `(numerator, denominator)` pairs when every size is a
/// perfect square, so they can be checked in exact arithmetic.
pub fn exact_probabilities(sizes: &[usize]) -> Option<Vec<(u64, u64)>> {
    let roots: Option<Vec<u64>> = sizes.iter().map(|&n| exact_sqrt(n as u64)).collect();
    let roots = roots?;
    let total: u64 = roots.iter().sum();
    (total > 0).then(|| roots.iter().map(|&r| (r, total)).collect())
}

/// Infinite i.i.d. stream of dataset indices.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    probabilities: Vec<f64>,
    dist: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        Self::with_rng(sizes, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(sizes: &[usize], rng: ChaCha8Rng) -> Result<Self> {
        let probabilities = balanced_probabilities(sizes)?;
        let dist = WeightedIndex::new(&probabilities)
            .map_err(|e| CromeError::Contract(format!("sampler weights: {e}")))?;
        Ok(Self { probabilities, dist, rng })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    /// Draws a dataset, then a record uniformly within it.
    pub fn next_item(&mut self, lens: &[usize]) -> (usize, usize) {
        let d = self.dist.sample(&mut self.rng);
        (d, self.rng.random_range(0..lens[d]))
    }
}

impl Iterator for BalancedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.dist.sample(&mut self.rng))
    }
}
