//! The LFIW estimator family, bootstrap intervals for learned weights and a
//! bias-variance harness over estimator variants.

use crate::error::{Error, Result};
use crate::par;
use crate::ratio::{
    importance_weights, probability_from_weight, train_classifier, train_classifier_from,
    LabeledRatioDataset, ProbClassifier, SamplePoint, TrainConfig,
};
use crate::rng;
use crate::sampling::PointSampler;
use crate::stats;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which member of the LFIW family to apply.
///
/// The default (`alpha = 1`, `beta = 0`, no normalization) is the plain
/// importance-weighted Monte Carlo average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub gamma: f64,
    /// Flattening power; 0 gives uniform weights.
    pub alpha: f64,
    /// Clipping floor applied after flattening.
    pub beta: f64,
    pub self_normalize: bool,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            alpha: 1.0,
            beta: 0.0,
            self_normalize: false,
        }
    }
}

impl WeightConfig {
    pub fn self_normalized() -> Self {
        Self {
            self_normalize: true,
            ..Self::default()
        }
    }

    pub fn flattened(alpha: f64) -> Self {
        Self {
            alpha,
            ..Self::default()
        }
    }

    pub fn clipped(beta: f64) -> Self {
        Self {
            beta,
            ..Self::default()
        }
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        Self { gamma, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }

    /// Short label such as `alpha=0.5,beta=0,sn=false`.
    pub fn label(&self) -> String {
        format!(
            "alpha={},beta={},sn={}",
            self.alpha, self.beta, self.self_normalize
        )
    }
}

/// The flattening sweep, the clipping sweep and self-normalization, in that order.
pub fn standard_config_grid() -> Vec<WeightConfig> {
    let mut grid: Vec<WeightConfig> = [0.0, 0.25, 0.5, 0.75, 1.0]
        .into_iter()
        .map(WeightConfig::flattened)
        .collect();
    grid.extend(
        [0.001, 0.01, 0.1, 1.0]
            .into_iter()
            .map(WeightConfig::clipped),
    );
    grid.push(WeightConfig::self_normalized());
    grid
}

/// Flatten (`w^alpha`), clip (`max(w, beta)`) and optionally normalize to sum 1.
pub fn transform_weights(raw: &[f64], config: &WeightConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if raw.is_empty() {
        return Err(Error::Empty("weight batch".into()));
    }
    if let Some(&w) = raw.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(Error::NonFinite(format!(
            "raw weight {w} (must be finite and >= 0)"
        )));
    }
    let mut w: Vec<f64> = raw
        .iter()
        .map(|&x| x.powf(config.alpha).max(config.beta))
        .collect();
    if config.self_normalize {
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::ZeroWeights);
        }
        w.iter_mut().for_each(|x| *x /= total);
    }
    Ok(w)
}

/// `(sum w)^2 / sum w^2`; zero when every weight is zero.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub effective_sample_size: f64,
}

impl WeightStats {
    pub fn of(weights: &[f64]) -> Self {
        let (min, max) = weights
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| {
                (lo.min(w), hi.max(w))
            });
        Self {
            min,
            max,
            mean: stats::mean(weights),
            effective_sample_size: effective_sample_size(weights),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub value: f64,
    /// Sample std of the weighted summands over sqrt(T).
    pub stderr: f64,
    pub batch_size: usize,
    /// Statistics of the transformed weights.
    pub weight_stats: WeightStats,
}

/// Combines already transformed weights with function values.
///
/// Self-normalized weights give `sum w f`; otherwise `(1/T) sum w f`. In both
/// cases the value is the mean of the summands `T w f` resp. `w f`.
pub fn weighted_estimate(
    transformed: &[f64],
    values: &[f64],
    self_normalized: bool,
) -> Result<EstimateReport> {
    if transformed.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: transformed.len(),
            found: values.len(),
        });
    }
    if transformed.is_empty() {
        return Err(Error::Empty("weight batch".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    let t = transformed.len() as f64;
    let scale = if self_normalized { t } else { 1.0 };
    let summands: Vec<f64> = transformed
        .iter()
        .zip(values)
        .map(|(w, f)| scale * w * f)
        .collect();
    let value = if self_normalized {
        transformed.iter().zip(values).map(|(w, f)| w * f).sum()
    } else {
        stats::mean(&summands)
    };
    Ok(EstimateReport {
        value,
        stderr: stats::std_error(&summands),
        batch_size: transformed.len(),
        weight_stats: WeightStats::of(transformed),
    })
}

/// Raw weights and function values in, estimate out.
pub fn estimate_from_values(
    raw_weights: &[f64],
    values: &[f64],
    config: &WeightConfig,
) -> Result<EstimateReport> {
    let w = transform_weights(raw_weights, config)?;
    weighted_estimate(&w, values, config.self_normalize)
}

/// Model samples with their raw and transformed importance weights.
///
/// Generic over the point type so whole trajectories can be weighted too.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatch<P = SamplePoint> {
    points: Vec<P>,
    raw_weights: Vec<f64>,
    transformed_weights: Vec<f64>,
    config: WeightConfig,
}

impl<P> WeightedBatch<P> {
    pub fn new(points: Vec<P>, raw_weights: Vec<f64>, config: WeightConfig) -> Result<Self> {
        if points.len() != raw_weights.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                found: raw_weights.len(),
            });
        }
        let transformed_weights = transform_weights(&raw_weights, &config)?;
        Ok(Self {
            points,
            raw_weights,
            transformed_weights,
            config,
        })
    }

    pub fn points(&self) -> &[P] {
        &self.points
    }

    pub fn raw_weights(&self) -> &[f64] {
        &self.raw_weights
    }

    pub fn transformed_weights(&self) -> &[f64] {
        &self.transformed_weights
    }

    pub fn config(&self) -> &WeightConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same points and raw weights under a different estimator variant.
    pub fn reweighted(&self, config: WeightConfig) -> Result<Self>
    where
        P: Clone,
    {
        Self::new(self.points.clone(), self.raw_weights.clone(), config)
    }

    pub fn estimate<F>(&self, f: F) -> Result<EstimateReport>
    where
        F: Fn(&P) -> f64,
    {
        let values: Vec<f64> = self.points.iter().map(f).collect();
        weighted_estimate(
            &self.transformed_weights,
            &values,
            self.config.self_normalize,
        )
    }
}

impl WeightedBatch<SamplePoint> {
    /// Weights the points with a trained classifier at odds ratio `config.gamma`.
    pub fn from_classifier(
        points: Vec<SamplePoint>,
        clf: &ProbClassifier,
        config: WeightConfig,
    ) -> Result<Self> {
        let raw = importance_weights(clf, config.gamma, &points)?;
        Self::new(points, raw, config)
    }
}

/// LFIW estimate of `E_p[f]` from the batch's model samples.
pub fn estimate_expectation<P, F>(batch: &WeightedBatch<P>, f: F) -> Result<EstimateReport>
where
    F: Fn(&P) -> f64,
{
    batch.estimate(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapMode {
    /// Resample both classes from the training data.
    Empirical,
    /// Keep the real data; draw fresh model samples.
    Parametric,
    /// Resample the real data and draw fresh model samples.
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub confidence: f64,
    pub mode: BootstrapMode,
    pub seed: u64,
    /// Start each resample from the full-data classifier and train this many
    /// epochs instead of training from scratch.
    pub warm_start_epochs: Option<usize>,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_resamples: 1000,
            confidence: 0.95,
            mode: BootstrapMode::Combined,
            seed: 0,
            warm_start_epochs: None,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_resamples < 2 {
            return Err(Error::config("bootstrap needs at least 2 resamples"));
        }
        if self.warm_start_epochs == Some(0) {
            return Err(Error::config("warm_start_epochs must be positive"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::config(format!(
                "confidence must lie in (0, 1), got {}",
                self.confidence
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightInterval {
    pub point_estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl WeightInterval {
    /// The same interval on the classifier-probability scale.
    pub fn to_probability(&self, gamma: f64) -> WeightInterval {
        WeightInterval {
            point_estimate: probability_from_weight(self.point_estimate, gamma),
            lower: probability_from_weight(self.lower, gamma),
            upper: probability_from_weight(self.upper, gamma),
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, w: f64) -> bool {
        self.lower <= w && w <= self.upper
    }
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub intervals: Vec<WeightInterval>,
    /// Classifier trained on the original dataset.
    pub classifier: ProbClassifier,
    pub gamma: f64,
}

fn resample_with_replacement(
    points: &[SamplePoint],
    rng: &mut crate::rng::SimRng,
) -> Vec<SamplePoint> {
    (0..points.len())
        .map(|_| points[rng.random_range(0..points.len())].clone())
        .collect()
}

/// Bootstrap intervals for the learned weight at each query point.
///
/// Every resample retrains the classifier with the same training config
/// (including its seed), so two identical resamples give identical
/// classifiers. With `warm_start_epochs` the retraining starts from the
/// full-data classifier, which is much cheaper for slow-to-converge models. Resample `r` draws from its own indexed stream of
/// `boot.seed`, which makes the result independent of scheduling.
pub fn bootstrap_ci<S>(
    dataset: &LabeledRatioDataset,
    model_sampler: Option<&S>,
    query_points: &[SamplePoint],
    train: &TrainConfig,
    boot: &BootstrapConfig,
) -> Result<BootstrapResult>
where
    S: PointSampler + ?Sized,
{
    boot.validate()?;
    train.validate()?;
    if matches!(
        boot.mode,
        BootstrapMode::Parametric | BootstrapMode::Combined
    ) && model_sampler.is_none()
    {
        return Err(Error::config(
            "parametric and combined bootstrap need a model sampler",
        ));
    }
    let gamma = dataset.gamma();
    let classifier = train_classifier(dataset, train)?;
    let point = importance_weights(&classifier, gamma, query_points)?;

    let per_resample: Vec<Vec<f64>> = par::try_map_indexed(boot.n_resamples, |r| {
        let mut rng = rng::stream(boot.seed, "bootstrap", r as u64);
        let positives = match boot.mode {
            BootstrapMode::Parametric => dataset.positives().to_vec(),
            _ => resample_with_replacement(dataset.positives(), &mut rng),
        };
        let negatives = match (boot.mode, model_sampler) {
            (BootstrapMode::Empirical, _) => {
                resample_with_replacement(dataset.negatives(), &mut rng)
            }
            (_, Some(s)) => s.sample_n(dataset.negatives().len(), &mut rng)?,
            (_, None) => unreachable!("checked above"),
        };
        let ds = LabeledRatioDataset::with_gamma(positives, negatives, gamma)?;
        let clf = match boot.warm_start_epochs {
            Some(epochs) => train_classifier_from(
                &classifier,
                &ds,
                &TrainConfig {
                    epochs,
                    ..train.clone()
                },
            )?,
            None => train_classifier(&ds, train)?,
        };
        importance_weights(&clf, gamma, query_points)
    })?;

    let lo_q = (1.0 - boot.confidence) / 2.0;
    let hi_q = (1.0 + boot.confidence) / 2.0;
    let intervals = (0..query_points.len())
        .map(|q| {
            let mut col: Vec<f64> = per_resample.iter().map(|w| w[q]).collect();
            col.sort_by(f64::total_cmp);
            WeightInterval {
                point_estimate: point[q],
                lower: stats::quantile_nearest(&col, lo_q),
                upper: stats::quantile_nearest(&col, hi_q),
            }
        })
        .collect();
    Ok(BootstrapResult {
        intervals,
        classifier,
        gamma,
    })
}

/// Percentile interval for the estimate itself, resampling the
/// `(weight, value)` pairs with replacement. The classifier is held fixed.
pub fn bootstrap_estimate(
    raw_weights: &[f64],
    values: &[f64],
    config: &WeightConfig,
    boot: &BootstrapConfig,
) -> Result<WeightInterval> {
    boot.validate()?;
    let point = estimate_from_values(raw_weights, values, config)?.value;
    let n = raw_weights.len();
    let estimates = par::try_map_indexed(boot.n_resamples, |r| {
        let mut rng = rng::stream(boot.seed, "bootstrap", r as u64);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let w: Vec<f64> = idx.iter().map(|&i| raw_weights[i]).collect();
        let v: Vec<f64> = idx.iter().map(|&i| values[i]).collect();
        estimate_from_values(&w, &v, config).map(|e| e.value)
    })?;
    let mut sorted = estimates;
    sorted.sort_by(f64::total_cmp);
    let tail = (1.0 - boot.confidence) / 2.0;
    Ok(WeightInterval {
        point_estimate: point,
        lower: stats::quantile_nearest(&sorted, tail),
        upper: stats::quantile_nearest(&sorted, 1.0 - tail),
    })
}

/// A scalar statistic of a point, identified for reporting.
pub struct Statistic<'a, P> {
    pub id: String,
    pub f: Box<dyn Fn(&P) -> f64 + Send + Sync + 'a>,
}

impl<'a, P> Statistic<'a, P> {
    pub fn new(id: impl Into<String>, f: impl Fn(&P) -> f64 + Send + Sync + 'a) -> Self {
        Self {
            id: id.into(),
            f: Box::new(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasVarianceRecord {
    pub statistic_id: String,
    /// `truth - mean estimate`.
    pub bias: f64,
    /// Population variance over trials.
    pub variance: f64,
    /// Mean squared error, computed directly.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasVarianceReport {
    pub config: WeightConfig,
    pub records: Vec<BiasVarianceRecord>,
    pub n_trials: usize,
}

impl BiasVarianceReport {
    /// Unweighted mean of |bias| over the statistics.
    pub fn mean_abs_bias(&self) -> f64 {
        stats::mean(
            &self
                .records
                .iter()
                .map(|r| r.bias.abs())
                .collect::<Vec<_>>(),
        )
    }

    pub fn mean_variance(&self) -> f64 {
        stats::mean(&self.records.iter().map(|r| r.variance).collect::<Vec<_>>())
    }

    pub fn mean_mse(&self) -> f64 {
        stats::mean(&self.records.iter().map(|r| r.mse).collect::<Vec<_>>())
    }
}

/// Bias, variance and mse of every estimator variant over repeated trials.
///
/// `trial_sampler(i)` returns the points and raw weights of trial `i`; all
/// variants see the same trials.
pub fn bias_variance_decompose<P, T>(
    configs: &[WeightConfig],
    statistics: &[Statistic<'_, P>],
    truth: &[f64],
    trial_sampler: T,
    n_trials: usize,
) -> Result<Vec<BiasVarianceReport>>
where
    P: Sync,
    T: Fn(usize) -> Result<(Vec<P>, Vec<f64>)> + Sync + Send,
{
    if truth.len() != statistics.len() {
        return Err(Error::DimensionMismatch {
            expected: statistics.len(),
            found: truth.len(),
        });
    }
    if n_trials < 2 {
        return Err(Error::config(
            "bias-variance harness needs at least 2 trials",
        ));
    }
    for c in configs {
        c.validate()?;
    }
    // estimates[trial][config][statistic]
    let estimates: Vec<Vec<Vec<f64>>> = par::try_map_indexed(n_trials, |i| {
        let (points, raw) = trial_sampler(i)?;
        if points.len() != raw.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                found: raw.len(),
            });
        }
        let values: Vec<Vec<f64>> = statistics
            .iter()
            .map(|s| points.iter().map(|p| (s.f)(p)).collect())
            .collect();
        configs
            .iter()
            .map(|c| {
                let w = transform_weights(&raw, c)?;
                values
                    .iter()
                    .map(|v| weighted_estimate(&w, v, c.self_normalize).map(|r| r.value))
                    .collect()
            })
            .collect()
    })?;

    Ok(configs
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let records = statistics
                .iter()
                .enumerate()
                .map(|(si, s)| {
                    let est: Vec<f64> = estimates.iter().map(|t| t[ci][si]).collect();
                    let m = stats::mean(&est);
                    let mse = stats::mean(
                        &est.iter()
                            .map(|e| (e - truth[si]).powi(2))
                            .collect::<Vec<_>>(),
                    );
                    BiasVarianceRecord {
                        statistic_id: s.id.clone(),
                        bias: truth[si] - m,
                        variance: stats::population_variance(&est),
                        mse,
                    }
                })
                .collect();
            BiasVarianceReport {
                config: *c,
                records,
                n_trials,
            }
        })
        .collect())
}
