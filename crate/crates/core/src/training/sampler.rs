use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};

/// Temperature-rebalanced language sampler: `p(l) ∝ count(l)^gamma`.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSampler {
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl LanguageSampler {
    pub fn new(counts: &[usize], gamma: f64) -> Result<Self> {
        if counts.is_empty() || counts.iter().any(|&c| c == 0) {
            return Err(Error::Precondition("language counts must be positive".into()));
        }
        if !(gamma >= 0.0) {
            return Err(Error::Config("balancing temperature must be >= 0".into()));
        }
        let w: Vec<f64> = counts.iter().map(|&c| libm::pow(c as f64, gamma)).collect();
        let z: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|v| v / z).collect();
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { probs, cumulative })
    }

    /// Like [`LanguageSampler::new`] but languages with a zero count get
    /// probability zero instead of being rejected.
    pub fn masked(counts: &[usize], gamma: f64) -> Result<Self> {
        if counts.iter().all(|&c| c == 0) {
            return Err(Error::Precondition("all language counts are zero".into()));
        }
        let w: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { libm::pow(c as f64, gamma) }).collect();
        let z: f64 = w.iter().sum();
        let probs: Vec<f64> = w.iter().map(|v| v / z).collect();
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { probs, cumulative })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.gen::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        self.cumulative.iter().position(|&c| u < c).unwrap_or(self.cumulative.len() - 1)
    }
}

/// One draw from `counts^gamma` normalization.
pub fn sample_language(counts: &[usize], gamma: f64, rng: &mut impl Rng) -> Result<usize> {
    Ok(LanguageSampler::new(counts, gamma)?.sample(rng))
}
