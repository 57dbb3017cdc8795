//! Sampling handles for model distributions.

use crate::error::{Error, Result};
use crate::ratio::SamplePoint;
use crate::rng::SimRng;
use rand::Rng;

/// Anything that can draw points from a (model) distribution.
pub trait PointSampler: Sync {
    fn sample(&self, rng: &mut SimRng) -> Result<SamplePoint>;

    fn sample_n(&self, n: usize, rng: &mut SimRng) -> Result<Vec<SamplePoint>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

impl<F> PointSampler for F
where
    F: Fn(&mut SimRng) -> SamplePoint + Sync,
{
    fn sample(&self, rng: &mut SimRng) -> Result<SamplePoint> {
        Ok(self(rng))
    }
}

/// Categorical distribution over symbols `0..K`, emitted as one-coordinate points.
#[derive(Debug, Clone)]
pub struct CategoricalSampler {
    cumulative: Vec<f64>,
}

impl CategoricalSampler {
    pub fn new(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("categorical probabilities".into()));
        }
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::config(
                "categorical probabilities must be finite and >= 0",
            ));
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroWeights);
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p / total;
                acc
            })
            .collect();
        Ok(Self { cumulative })
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn sample_index(&self, rng: &mut SimRng) -> usize {
        let u: f64 = rng.random();
        let idx = self.cumulative.partition_point(|&c| c <= u);
        // Guard the final bucket against rounding in the running sum; also
        // skip trailing zero-probability symbols.
        idx.min(self.last_positive())
    }

    fn last_positive(&self) -> usize {
        let n = self.cumulative.len();
        let mut k = n - 1;
        while k > 0 && self.cumulative[k] == self.cumulative[k - 1] {
            k -= 1;
        }
        k
    }
}

impl PointSampler for CategoricalSampler {
    fn sample(&self, rng: &mut SimRng) -> Result<SamplePoint> {
        Ok(SamplePoint::scalar(self.sample_index(rng) as f64))
    }
}

/// Sample an index proportional to non-negative `weights`.
pub fn sample_proportional(weights: &[f64], rng: &mut SimRng) -> Result<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::ZeroWeights);
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return Ok(i);
            }
        }
    }
    Ok(last)
}
