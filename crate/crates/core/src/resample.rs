//! The importance-resampled model `p_theta * w / Z`: partition function,
//! sampling-importance-resampling, SIR densities and KL diagnostics.

use crate::error::{Error, Result};
use crate::par;
use crate::ratio::SamplePoint;
use crate::rng::{self, SimRng};
use crate::sampling::{sample_proportional, PointSampler};
use crate::stats;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

const SUM_TOLERANCE: f64 = 1e-12;
const MAX_EXACT_SYMBOLS: usize = 6;
const MAX_EXACT_PARTICLES: usize = 3;

/// Two probability vectors over symbols `0..K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistributionPair {
    p: Vec<f64>,
    p_theta: Vec<f64>,
}

fn check_probability_vector(v: &[f64], name: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Empty(format!("{name} has no symbols")));
    }
    if v.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::config(format!(
            "{name} entries must be finite and >= 0"
        )));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::config(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// Shannon KL divergence `sum a log(a / b)` with `0 log 0 = 0`.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x > 0.0 {
            if y <= 0.0 {
                return Err(Error::SupportViolation { index: i });
            }
            total += x * (x / y).ln();
        }
    }
    Ok(total)
}

impl DiscreteDistributionPair {
    /// Validates both vectors and that `p` is absolutely continuous w.r.t. `p_theta`.
    pub fn new(p: Vec<f64>, p_theta: Vec<f64>) -> Result<Self> {
        if p.len() != p_theta.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                found: p_theta.len(),
            });
        }
        check_probability_vector(&p, "p")?;
        check_probability_vector(&p_theta, "p_theta")?;
        if let Some(index) = (0..p.len()).find(|&i| p[i] > 0.0 && p_theta[i] == 0.0) {
            return Err(Error::SupportViolation { index });
        }
        Ok(Self { p, p_theta })
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn p_theta(&self) -> &[f64] {
        &self.p_theta
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// `p / p_theta`, zero off the model support.
    pub fn oracle_weights(&self) -> Vec<f64> {
        self.p
            .iter()
            .zip(&self.p_theta)
            .map(|(&a, &b)| if b > 0.0 { a / b } else { 0.0 })
            .collect()
    }

    /// Bayes-optimal classifier probabilities `p / (p + gamma p_theta)`.
    pub fn bayes_probabilities(&self, gamma: f64) -> Result<Vec<f64>> {
        self.p
            .iter()
            .zip(&self.p_theta)
            .map(|(&a, &b)| crate::ratio::bayes_optimal_probability(a, b, gamma))
            .collect()
    }

    fn check_weights(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                found: w.len(),
            });
        }
        if let Some(x) = w.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::NonFinite(format!(
                "weight {x} (must be finite and >= 0)"
            )));
        }
        Ok(())
    }

    pub fn kl(&self) -> f64 {
        kl_divergence(&self.p, &self.p_theta).expect("support checked on construction")
    }

    pub fn expectation_p(&self, f: &[f64]) -> f64 {
        self.p.iter().zip(f).map(|(a, b)| a * b).sum()
    }

    /// The default LFIW estimator in expectation: `sum_x p_theta(x) w(x) f(x)`.
    pub fn exact_default_estimate(&self, w: &[f64], f: &[f64]) -> Result<f64> {
        self.check_weights(w)?;
        Ok((0..self.len()).map(|i| self.p_theta[i] * w[i] * f[i]).sum())
    }

    /// `Z = sum_x p_theta(x) w(x)`.
    pub fn exact_partition(&self, w: &[f64]) -> Result<f64> {
        self.check_weights(w)?;
        Ok(self.p_theta.iter().zip(w).map(|(a, b)| a * b).sum())
    }

    /// The induced distribution `p_theta w / Z`.
    pub fn resampled(&self, w: &[f64]) -> Result<Vec<f64>> {
        let z = self.exact_partition(w)?;
        if z <= 0.0 {
            return Err(Error::ZeroWeights);
        }
        Ok(self.p_theta.iter().zip(w).map(|(a, b)| a * b / z).collect())
    }

    /// `KL(p || p_theta w / Z) - KL(p || p_theta)`; negative means the
    /// resampled model is closer to `p`.
    pub fn exact_delta_kl(&self, w: &[f64]) -> Result<f64> {
        self.check_weights(w)?;
        if let Some(i) = (0..self.len()).find(|&i| self.p[i] > 0.0 && w[i] <= 0.0) {
            return Err(Error::SupportViolation { index: i });
        }
        let q = self.resampled(w)?;
        Ok(kl_divergence(&self.p, &q)? - self.kl())
    }

    /// Diagnostics with every expectation computed by enumeration.
    pub fn exact_kl_diagnostics(&self, w: &[f64]) -> Result<KlDiagnostics> {
        self.check_weights(w)?;
        let mut e_p_log = 0.0;
        let mut e_p_w = 0.0;
        let mut e_theta_w = 0.0;
        let mut e_theta_log = 0.0;
        for i in 0..self.len() {
            let (a, b) = (self.p[i], self.p_theta[i]);
            if (a > 0.0 || b > 0.0) && w[i] <= 0.0 {
                return Err(Error::NonPositiveWeight(w[i]));
            }
            if a > 0.0 {
                e_p_log += a * w[i].ln();
                e_p_w += a * w[i];
            }
            if b > 0.0 {
                e_theta_log += b * w[i].ln();
                e_theta_w += b * w[i];
            }
        }
        Ok(KlDiagnostics::from_moments(
            e_p_log,
            e_theta_w.ln(),
            e_p_w - e_theta_w,
            e_p_log - e_theta_log,
            [0.0; 4],
        ))
    }

    /// SIR density at every symbol by enumerating the auxiliary particles.
    ///
    /// Limited to `T <= 3` and `K <= 6`.
    pub fn exact_sir_density(&self, w: &[f64], particles: usize) -> Result<Vec<f64>> {
        self.check_weights(w)?;
        if particles == 0 {
            return Err(Error::config("particles must be >= 1"));
        }
        if particles > MAX_EXACT_PARTICLES || self.len() > MAX_EXACT_SYMBOLS {
            return Err(Error::Unsupported(format!(
                "exact SIR density needs T <= {MAX_EXACT_PARTICLES} and K <= {MAX_EXACT_SYMBOLS}"
            )));
        }
        let k = self.len();
        let aux = particles - 1;
        let n_tuples = k.pow(aux as u32);
        Ok((0..k)
            .map(|x| {
                let mut acc = 0.0;
                for t in 0..n_tuples {
                    let (mut code, mut prob, mut others) = (t, 1.0, 0.0);
                    for _ in 0..aux {
                        let s = code % k;
                        code /= k;
                        prob *= self.p_theta[s];
                        others += w[s];
                    }
                    acc += prob * sir_fraction(w[x], others);
                }
                particles as f64 * self.p_theta[x] * acc
            })
            .collect())
    }
}

fn sir_fraction(own: f64, others: f64) -> f64 {
    let denom = own + others;
    if denom > 0.0 {
        own / denom
    } else {
        0.0
    }
}

/// A random `(p, p_theta, w)` triple: Dirichlet(1) densities and
/// log-uniform weights on `[e^-2, e^2]`.
pub fn random_triple(rng: &mut SimRng, k: usize) -> (DiscreteDistributionPair, Vec<f64>) {
    let p = random_simplex(rng, k);
    let q = random_simplex(rng, k);
    let w = (0..k)
        .map(|_| rng.random_range(-2.0..=2.0f64).exp())
        .collect();
    (
        DiscreteDistributionPair::new(p, q).expect("dirichlet draws are valid"),
        w,
    )
}

/// A Dirichlet(1, ..., 1) draw with strictly positive entries.
pub fn random_simplex(rng: &mut SimRng, k: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..k)
        .map(|_| {
            let x: f64 = Exp1.sample(rng);
            x.max(f64::MIN_POSITIVE)
        })
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Randomized search for a triple whose necessary conditions both hold
/// although resampling makes the model worse.
pub fn search_insufficiency_witness(
    seed: u64,
    max_tries: usize,
) -> Option<(DiscreteDistributionPair, Vec<f64>)> {
    let mut rng = rng::stream(seed, "witness", 0);
    for _ in 0..max_tries {
        let k = rng.random_range(2..=4);
        let (pair, w) = random_triple(&mut rng, k);
        let d = pair.exact_kl_diagnostics(&w).ok()?;
        if d.nec1_gap >= 0.0 && d.nec2_gap >= 0.0 && d.delta_estimate > 0.0 {
            return Some((pair, w));
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    /// Both necessary conditions for a KL improvement hold.
    NecessaryConditionsHold,
    /// A necessary condition fails, so resampling cannot improve the model.
    NoImprovement,
}

/// Monte Carlo (or exact) pieces of the KL-change decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlDiagnostics {
    /// `E_p[log w]`.
    pub lhs_estimate: f64,
    /// `log E_{p_theta}[w]`; biased when estimated from samples.
    pub rhs_log_mean: f64,
    /// `rhs_log_mean - lhs_estimate`, the estimated change in KL.
    pub delta_estimate: f64,
    /// `E_p[w] - E_{p_theta}[w]`.
    pub nec1_gap: f64,
    /// `E_p[log w] - E_{p_theta}[log w]`.
    pub nec2_gap: f64,
    pub lhs_stderr: f64,
    pub rhs_stderr: f64,
    pub nec1_stderr: f64,
    pub nec2_stderr: f64,
    pub verdict: Verdict,
}

impl KlDiagnostics {
    fn from_moments(lhs: f64, rhs: f64, nec1: f64, nec2: f64, se: [f64; 4]) -> Self {
        let verdict = if nec1 >= 0.0 && nec2 >= 0.0 {
            Verdict::NecessaryConditionsHold
        } else {
            Verdict::NoImprovement
        };
        Self {
            lhs_estimate: lhs,
            rhs_log_mean: rhs,
            delta_estimate: rhs - lhs,
            nec1_gap: nec1,
            nec2_gap: nec2,
            lhs_stderr: se[0],
            rhs_stderr: se[1],
            nec1_stderr: se[2],
            nec2_stderr: se[3],
            verdict,
        }
    }
}

fn positive_weights<W>(points: &[SamplePoint], weight_fn: &W) -> Result<Vec<f64>>
where
    W: Fn(&SamplePoint) -> f64 + Sync,
{
    par::map_slice(points, weight_fn)
        .into_iter()
        .map(|w| {
            if w > 0.0 && w.is_finite() {
                Ok(w)
            } else {
                Err(Error::NonPositiveWeight(w))
            }
        })
        .collect()
}

/// Sample-based KL diagnostics from real data and model samples.
pub fn kl_diagnostics<W>(
    real_data: &[SamplePoint],
    model_samples: &[SamplePoint],
    weight_fn: W,
) -> Result<KlDiagnostics>
where
    W: Fn(&SamplePoint) -> f64 + Sync,
{
    if real_data.is_empty() || model_samples.is_empty() {
        return Err(Error::Empty(
            "kl diagnostics need real and model samples".into(),
        ));
    }
    let wr = positive_weights(real_data, &weight_fn)?;
    let wm = positive_weights(model_samples, &weight_fn)?;
    let log_r: Vec<f64> = wr.iter().map(|w| w.ln()).collect();
    let log_m: Vec<f64> = wm.iter().map(|w| w.ln()).collect();
    let mean_wm = stats::mean(&wm);
    let se_wr = stats::std_error(&wr);
    let se_wm = stats::std_error(&wm);
    let se_lr = stats::std_error(&log_r);
    let se_lm = stats::std_error(&log_m);
    Ok(KlDiagnostics::from_moments(
        stats::mean(&log_r),
        mean_wm.ln(),
        stats::mean(&wr) - mean_wm,
        stats::mean(&log_r) - stats::mean(&log_m),
        [
            se_lr,
            se_wm / mean_wm,
            se_wr.hypot(se_wm),
            se_lr.hypot(se_lm),
        ],
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MonteCarloValue {
    pub value: f64,
    pub stderr: f64,
}

/// `T` particles from the base model with their raw weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleBatch {
    pub particles: Vec<SamplePoint>,
    pub weights: Vec<f64>,
}

impl ParticleBatch {
    /// Expectation of `f` under the categorical resampling distribution.
    pub fn conditional_expectation<F: Fn(&SamplePoint) -> f64>(&self, f: F) -> Result<f64> {
        let z: f64 = self.weights.iter().sum();
        if !(z > 0.0) {
            return Err(Error::ZeroWeights);
        }
        Ok(self
            .particles
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w / z * f(x))
            .sum())
    }
}

/// A base sampler reweighted by `weight_fn`, sampled with `T` particles.
pub struct ResampledModel<S, W> {
    base: S,
    weight_fn: W,
    particles: usize,
}

impl<S, W> ResampledModel<S, W>
where
    S: PointSampler,
    W: Fn(&SamplePoint) -> f64 + Sync,
{
    pub fn new(base: S, weight_fn: W, particles: usize) -> Result<Self> {
        if particles == 0 {
            return Err(Error::config("particles must be >= 1"));
        }
        Ok(Self {
            base,
            weight_fn,
            particles,
        })
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn base(&self) -> &S {
        &self.base
    }

    fn weight(&self, x: &SamplePoint) -> Result<f64> {
        let w = (self.weight_fn)(x);
        if w >= 0.0 && w.is_finite() {
            Ok(w)
        } else {
            Err(Error::NonFinite(format!("importance weight {w}")))
        }
    }

    /// Monte Carlo estimate of `Z = E_{p_theta}[w]` from raw weights.
    pub fn estimate_partition(&self, n_samples: usize, seed: u64) -> Result<MonteCarloValue> {
        if n_samples == 0 {
            return Err(Error::config("n_samples must be >= 1"));
        }
        let mut rng = rng::stream(seed, "partition", 0);
        let w = self
            .base
            .sample_n(n_samples, &mut rng)?
            .iter()
            .map(|x| self.weight(x))
            .collect::<Result<Vec<f64>>>()?;
        Ok(MonteCarloValue {
            value: stats::mean(&w),
            stderr: stats::std_error(&w),
        })
    }

    /// Draws the `T` particles of one SIR step.
    pub fn draw_particles(&self, rng: &mut SimRng) -> Result<ParticleBatch> {
        let particles = self.base.sample_n(self.particles, rng)?;
        let weights = particles
            .iter()
            .map(|x| self.weight(x))
            .collect::<Result<Vec<f64>>>()?;
        Ok(ParticleBatch { particles, weights })
    }

    fn sir_with(&self, rng: &mut SimRng) -> Result<SamplePoint> {
        let mut batch = self.draw_particles(rng)?;
        let j = if self.particles == 1 {
            0
        } else {
            sample_proportional(&batch.weights, rng)?
        };
        Ok(batch.particles.swap_remove(j))
    }

    /// One SIR draw.
    pub fn sir_sample(&self, seed: u64) -> Result<SamplePoint> {
        self.sir_with(&mut rng::stream(seed, "sir", 0))
    }

    /// `n` independent SIR draws; draw `i` uses stream `i` of `seed`, so
    /// `sir_draws(n, s)[0] == sir_sample(s)`.
    pub fn sir_draws(&self, n: usize, seed: u64) -> Result<Vec<SamplePoint>> {
        par::try_map_indexed(n, |i| {
            self.sir_with(&mut rng::stream(seed, "sir", i as u64))
        })
    }

    /// SIR density at `x`, scaled by `T` so it integrates to one.
    pub fn sir_density<D>(
        &self,
        x: &SamplePoint,
        base_density: D,
        n_outer: usize,
        seed: u64,
    ) -> Result<MonteCarloValue>
    where
        D: Fn(&SamplePoint) -> f64,
    {
        if n_outer == 0 {
            return Err(Error::config("n_outer must be >= 1"));
        }
        let px = base_density(x);
        if !(px >= 0.0 && px.is_finite()) {
            return Err(Error::NonFinite(format!("base density {px}")));
        }
        let wx = self.weight(x)?;
        let t = self.particles as f64;
        let values: Vec<f64> = par::try_map_indexed(n_outer, |r| {
            let mut rng = rng::stream(seed, "sir-density", r as u64);
            let mut others = 0.0;
            for _ in 1..self.particles {
                others += self.weight(&self.base.sample(&mut rng)?)?;
            }
            Ok::<f64, Error>(t * px * sir_fraction(wx, others))
        })?;
        Ok(MonteCarloValue {
            value: stats::mean(&values),
            stderr: stats::std_error(&values),
        })
    }

    /// Diagnostics of this model's weight function on real and model samples.
    pub fn kl_diagnostics(
        &self,
        real_data: &[SamplePoint],
        model_samples: &[SamplePoint],
    ) -> Result<KlDiagnostics> {
        kl_diagnostics(real_data, model_samples, &self.weight_fn)
    }
}

/// Relative frequencies of symbol-valued draws over `0..k`.
pub fn empirical_distribution(draws: &[SamplePoint], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for d in draws {
        let s = d.first() as usize;
        if s < k {
            counts[s] += 1;
        }
    }
    counts
        .iter()
        .map(|&c| c as f64 / draws.len().max(1) as f64)
        .collect()
}
