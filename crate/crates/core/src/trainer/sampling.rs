//! Size-weighted study sampling and per-study minibatch cursors.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

fn weights(sizes: &[usize], beta: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::InvalidInput("study sizes must be positive".into()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidInput(format!("study-weight exponent {beta} outside [0, 1]")));
    }
    Ok(sizes.iter().map(|&n| (n as f64).powf(beta)).collect())
}

/// `pi_j = n_j^beta / sum_i n_i^beta`.
pub fn study_probabilities(sizes: &[usize], beta: f64) -> Result<Vec<f64>> {
    let w = weights(sizes, beta)?;
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Number of maps each study effectively contributes: `N * pi_j`, with `N`
/// the total map count.
pub fn effective_sample_size(sizes: &[usize], beta: f64) -> Result<Vec<f64>> {
    let total = sizes.iter().sum::<usize>() as f64;
    Ok(study_probabilities(sizes, beta)?.into_iter().map(|p| total * p).collect())
}

/// Draws a study index with probability proportional to `n_j^beta`.
pub fn sample_study<R: Rng + ?Sized>(sizes: &[usize], beta: f64, rng: &mut R) -> Result<usize> {
    Ok(StudySampler::new(sizes, beta)?.sample(rng))
}

#[derive(Debug, Clone)]
pub struct StudySampler {
    dist: WeightedIndex<f64>,
}

impl StudySampler {
    pub fn new(sizes: &[usize], beta: f64) -> Result<Self> {
        let w = weights(sizes, beta)?;
        let dist = WeightedIndex::new(&w).map_err(|e| Error::InvalidInput(format!("study weights: {e}")))?;
        Ok(StudySampler { dist })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }
}

/// Cycles through a shuffled permutation of `0..n`, reshuffling once exhausted.
#[derive(Debug, Clone)]
pub(crate) struct BatchCursor {
    order: Vec<usize>,
    pos: usize,
}

impl BatchCursor {
    pub(crate) fn new<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        BatchCursor { order, pos: 0 }
    }

    /// Next batch of at most `size` indices; the final batch of a pass may be short.
    pub(crate) fn next_batch<R: Rng + ?Sized>(&mut self, size: usize, rng: &mut R) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let end = (self.pos + size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }
}
