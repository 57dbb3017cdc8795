//! Reference experiments: the 1-D Gaussian-mixture study, a moment-estimation
//! toy built on it, and a 2-D weighted data-augmentation task.

use crate::error::{Error, Result};
use crate::estimators::{bootstrap_ci, transform_weights, BootstrapConfig, WeightConfig};
use crate::par;
use crate::ratio::{
    importance_weights, train_classifier, weight_from_probability, Architecture,
    LabeledRatioDataset, Optimizer, ProbClassifier, SamplePoint, TrainConfig,
};
use crate::rng::{self, SimRng};
use crate::sampling::PointSampler;
use crate::stats;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub fn normal_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    (-0.5 * z * z).exp() / (std * (2.0 * PI).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMixture1D {
    pub component_means: Vec<f64>,
    pub component_stds: Vec<f64>,
    pub mixture_weights: Vec<f64>,
}

impl GaussianMixture1D {
    pub fn new(means: Vec<f64>, stds: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let m = Self {
            component_means: means,
            component_stds: stds,
            mixture_weights: weights,
        };
        m.validate()?;
        Ok(m)
    }

    /// `0.5 N(-1, 0.5^2) + 0.5 N(1, 0.5^2)`.
    pub fn canonical() -> Self {
        Self {
            component_means: vec![-1.0, 1.0],
            component_stds: vec![0.5, 0.5],
            mixture_weights: vec![0.5, 0.5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.component_means.len();
        if k == 0 {
            return Err(Error::Empty("mixture has no components".into()));
        }
        if self.component_stds.len() != k || self.mixture_weights.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                found: self.component_stds.len().min(self.mixture_weights.len()),
            });
        }
        if self
            .component_stds
            .iter()
            .any(|s| !(*s > 0.0 && s.is_finite()))
        {
            return Err(Error::config("component stds must be positive"));
        }
        if self.mixture_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::config("mixture weights must be >= 0"));
        }
        let s: f64 = self.mixture_weights.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("mixture weights sum to {s}, not 1")));
        }
        Ok(())
    }

    pub fn density(&self, x: f64) -> f64 {
        (0..self.component_means.len())
            .map(|i| {
                self.mixture_weights[i]
                    * normal_pdf(x, self.component_means[i], self.component_stds[i])
            })
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.mixture_weights
            .iter()
            .zip(&self.component_means)
            .map(|(w, m)| w * m)
            .sum()
    }

    /// `E[x^2] = sum w (sigma^2 + mu^2)`.
    pub fn second_moment(&self) -> f64 {
        (0..self.component_means.len())
            .map(|i| {
                let (m, s) = (self.component_means[i], self.component_stds[i]);
                self.mixture_weights[i] * (s * s + m * m)
            })
            .sum()
    }

    pub fn variance(&self) -> f64 {
        self.second_moment() - self.mean().powi(2)
    }

    pub fn draw(&self, rng: &mut SimRng) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.mixture_weights.len() - 1;
        for (i, w) in self.mixture_weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let z: f64 = StandardNormal.sample(rng);
        self.component_means[k] + self.component_stds[k] * z
    }

    pub fn draw_n(&self, n: usize, rng: &mut SimRng) -> Vec<f64> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

impl PointSampler for GaussianMixture1D {
    fn sample(&self, rng: &mut SimRng) -> Result<SamplePoint> {
        Ok(SamplePoint::scalar(self.draw(rng)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentMatchedGaussian {
    pub mean: f64,
    pub std: f64,
}

impl MomentMatchedGaussian {
    pub fn density(&self, x: f64) -> f64 {
        normal_pdf(x, self.mean, self.std)
    }

    pub fn second_moment(&self) -> f64 {
        self.std * self.std + self.mean * self.mean
    }

    pub fn draw(&self, rng: &mut SimRng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.mean + self.std * z
    }

    pub fn draw_n(&self, n: usize, rng: &mut SimRng) -> Vec<f64> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}

impl PointSampler for MomentMatchedGaussian {
    fn sample(&self, rng: &mut SimRng) -> Result<SamplePoint> {
        Ok(SamplePoint::scalar(self.draw(rng)))
    }
}

/// Gaussian with the sample mean and the divide-by-n standard deviation.
pub fn fit_moment_matched(samples: &[f64]) -> Result<MomentMatchedGaussian> {
    if samples.len() < 2 {
        return Err(Error::Empty(
            "moment matching needs at least 2 samples".into(),
        ));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("sample value".into()));
    }
    let std = stats::population_variance(samples).sqrt();
    if !(std > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(MomentMatchedGaussian {
        mean: stats::mean(samples),
        std,
    })
}

/// `p / (p + gamma p_theta)` on each grid point.
pub fn analytic_bayes_curve(
    mixture: &GaussianMixture1D,
    model: &MomentMatchedGaussian,
    gamma: f64,
    grid: &[f64],
) -> Result<Vec<f64>> {
    grid.iter()
        .map(|&x| {
            crate::ratio::bayes_optimal_probability(mixture.density(x), model.density(x), gamma)
        })
        .collect()
}

/// 161 evenly spaced points on `[-4, 4]`.
pub fn fig1_grid() -> Vec<f64> {
    (0..161).map(|i| -4.0 + 0.05 * i as f64).collect()
}

fn scalars(xs: &[f64]) -> Vec<SamplePoint> {
    xs.iter().map(|&x| SamplePoint::scalar(x)).collect()
}

/// Classifier settings used for the mixture experiments: a 100-unit tanh
/// network trained with Adam long enough to be close to optimal at n = 1000.
pub fn fig1_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        architecture: Architecture::Mlp,
        optimizer: Optimizer::Adam,
        learning_rate: 0.01,
        epochs: 800,
        batch_size: 64,
        seed,
        hidden_units: 100,
        l2_penalty: 0.0,
        momentum: 0.9,
    }
}

/// Epochs per bootstrap resample, started from the full-data classifier.
pub const FIG1_WARM_START_EPOCHS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Config {
    pub n_per_class: usize,
    pub seed: u64,
    pub mixture: GaussianMixture1D,
    pub train: TrainConfig,
    /// `None` skips the bootstrap bands.
    pub bootstrap: Option<BootstrapConfig>,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Self {
            n_per_class: 1000,
            seed: 0,
            mixture: GaussianMixture1D::canonical(),
            train: fig1_train_config(0),
            bootstrap: Some(BootstrapConfig {
                warm_start_epochs: Some(FIG1_WARM_START_EPOCHS),
                ..BootstrapConfig::default()
            }),
        }
    }
}

impl Fig1Config {
    /// Config for `(n, seed)` with the training and bootstrap streams tied to `seed`.
    pub fn for_seed(n_per_class: usize, seed: u64, bootstrap_resamples: Option<usize>) -> Self {
        Self {
            n_per_class,
            seed,
            train: fig1_train_config(rng::derive_seed(seed, "train", 0)),
            bootstrap: bootstrap_resamples.map(|n| BootstrapConfig {
                n_resamples: n,
                seed: rng::derive_seed(seed, "bootstrap", 0),
                warm_start_epochs: Some(FIG1_WARM_START_EPOCHS),
                ..BootstrapConfig::default()
            }),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig1Result {
    pub grid: Vec<f64>,
    pub c_hat: Vec<f64>,
    pub c_opt: Vec<f64>,
    /// Bootstrap band on the probability scale.
    pub band_lo: Option<Vec<f64>>,
    pub band_hi: Option<Vec<f64>>,
    pub mean_abs_gap: f64,
    pub gamma: f64,
    pub model: MomentMatchedGaussian,
}

impl Fig1Result {
    pub fn median_band_width(&self) -> Option<f64> {
        let (lo, hi) = (self.band_lo.as_ref()?, self.band_hi.as_ref()?);
        let widths: Vec<f64> = hi.iter().zip(lo).map(|(h, l)| h - l).collect();
        Some(stats::median(&widths))
    }

    /// `x,c_hat,c_opt,band_lo,band_hi`; band columns are blank without a bootstrap.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,c_hat,c_opt,band_lo,band_hi\n");
        for i in 0..self.grid.len() {
            let band =
                |b: &Option<Vec<f64>>| b.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.grid[i],
                self.c_hat[i],
                self.c_opt[i],
                band(&self.band_lo),
                band(&self.band_hi)
            ));
        }
        out
    }
}

/// Trains the classifier on `n` mixture samples against `n` samples of the
/// Gaussian fitted to them and compares its curve with the optimal one.
pub fn run_fig1_experiment(config: &Fig1Config) -> Result<Fig1Result> {
    let n = config.n_per_class;
    if n < 10 {
        return Err(Error::config("fig1 needs n_per_class >= 10"));
    }
    config.mixture.validate()?;
    let real = config
        .mixture
        .draw_n(n, &mut rng::stream(config.seed, "data", 0));
    let model = fit_moment_matched(&real)?;
    let fake = model.draw_n(n, &mut rng::stream(config.seed, "data", 1));
    let dataset = LabeledRatioDataset::new(scalars(&real), scalars(&fake))?;
    let gamma = dataset.gamma();
    let grid = fig1_grid();
    let query = scalars(&grid);
    let c_opt = analytic_bayes_curve(&config.mixture, &model, gamma, &grid)?;

    let (clf, band_lo, band_hi) = match &config.bootstrap {
        Some(boot) => {
            let res = bootstrap_ci(&dataset, Some(&model), &query, &config.train, boot)?;
            let probs: Vec<_> = res
                .intervals
                .iter()
                .map(|iv| iv.to_probability(gamma))
                .collect();
            (
                res.classifier,
                Some(probs.iter().map(|p| p.lower).collect()),
                Some(probs.iter().map(|p| p.upper).collect()),
            )
        }
        None => (train_classifier(&dataset, &config.train)?, None, None),
    };
    let c_hat = clf.predict_batch(&query)?;
    let mean_abs_gap = stats::mean(
        &c_hat
            .iter()
            .zip(&c_opt)
            .map(|(a, b)| (a - b).abs())
            .collect::<Vec<_>>(),
    );
    Ok(Fig1Result {
        grid,
        c_hat,
        c_opt,
        band_lo,
        band_hi,
        mean_abs_gap,
        gamma,
        model,
    })
}

/// Estimating `E_p[x^2]` from a moment-matched model with learned weights.
///
/// The model is fitted to a small pilot sample, so its second moment carries
/// the pilot's sampling error; the classifier sees a larger real sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentToyConfig {
    pub n_fit: usize,
    pub n_train: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for MomentToyConfig {
    fn default() -> Self {
        Self {
            n_fit: 20,
            n_train: 1000,
            batch_size: 5000,
            seed: 0,
            train: fig1_train_config(0),
        }
    }
}

impl MomentToyConfig {
    pub fn for_seed(seed: u64) -> Self {
        Self {
            seed,
            train: fig1_train_config(rng::derive_seed(seed, "train", 0)),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct MomentToy {
    pub mixture: GaussianMixture1D,
    pub model: MomentMatchedGaussian,
    pub classifier: ProbClassifier,
    pub gamma: f64,
    pub batch_size: usize,
    seed: u64,
}

impl MomentToy {
    pub fn build(config: &MomentToyConfig) -> Result<Self> {
        let mixture = GaussianMixture1D::canonical();
        let pilot = mixture.draw_n(config.n_fit, &mut rng::stream(config.seed, "pilot", 0));
        let model = fit_moment_matched(&pilot)?;
        let real = mixture.draw_n(config.n_train, &mut rng::stream(config.seed, "data", 0));
        let fake = model.draw_n(config.n_train, &mut rng::stream(config.seed, "data", 1));
        let dataset = LabeledRatioDataset::new(scalars(&real), scalars(&fake))?;
        let classifier = train_classifier(&dataset, &config.train)?;
        Ok(Self {
            mixture,
            model,
            classifier,
            gamma: dataset.gamma(),
            batch_size: config.batch_size,
            seed: config.seed,
        })
    }

    pub fn truth(&self) -> f64 {
        self.mixture.second_moment()
    }

    /// Model batch `trial` with its learned raw weights.
    pub fn batch(&self, trial: usize) -> Result<(Vec<SamplePoint>, Vec<f64>)> {
        let xs = self.model.draw_n(
            self.batch_size,
            &mut rng::stream(self.seed, "batch", trial as u64),
        );
        let points = scalars(&xs);
        let w = importance_weights(&self.classifier, self.gamma, &points)?;
        Ok((points, w))
    }

    /// Oracle weights `p / p_theta` for the same batch.
    pub fn oracle_batch(&self, trial: usize) -> (Vec<SamplePoint>, Vec<f64>) {
        let xs = self.model.draw_n(
            self.batch_size,
            &mut rng::stream(self.seed, "batch", trial as u64),
        );
        let w = xs
            .iter()
            .map(|&x| self.mixture.density(x) / self.model.density(x))
            .collect();
        (scalars(&xs), w)
    }
}

/// A labeled point of a classification task.
pub type Labeled = (SamplePoint, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTask {
    pub real_labeled: Vec<Labeled>,
    pub generated_labeled: Vec<Labeled>,
    pub mixture_m: f64,
    pub n_classes: usize,
}

impl AugmentedTask {
    pub fn new(
        real_labeled: Vec<Labeled>,
        generated_labeled: Vec<Labeled>,
        mixture_m: f64,
        n_classes: usize,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&mixture_m) {
            return Err(Error::config(format!(
                "m must lie in [0, 1], got {mixture_m}"
            )));
        }
        if n_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if let Some((_, y)) = real_labeled
            .iter()
            .chain(&generated_labeled)
            .find(|(_, y)| *y >= n_classes)
        {
            return Err(Error::config(format!("label {y} out of range")));
        }
        Ok(Self {
            real_labeled,
            generated_labeled,
            mixture_m,
            n_classes,
        })
    }

    pub fn with_m(&self, m: f64) -> Result<Self> {
        Self::new(
            self.real_labeled.clone(),
            self.generated_labeled.clone(),
            m,
            self.n_classes,
        )
    }
}

/// Multinomial logistic regression; row `k` of the parameters is
/// `[w_k (d entries), b_k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamClassifier {
    pub n_classes: usize,
    pub input_dim: usize,
    pub params: Vec<f64>,
}

impl DownstreamClassifier {
    pub fn zeros(n_classes: usize, input_dim: usize) -> Self {
        Self {
            n_classes,
            input_dim,
            params: vec![0.0; n_classes * (input_dim + 1)],
        }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.input_dim;
        (0..self.n_classes)
            .map(|k| {
                let row = &self.params[k * (d + 1)..(k + 1) * (d + 1)];
                row[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[d]
            })
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        let z = self.logits(x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    pub fn cross_entropy(&self, x: &[f64], y: usize) -> f64 {
        let z = self.logits(x);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - z[y]
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..z.len()).fold(0, |best, k| if z[k] > z[best] { k } else { best })
    }

    pub fn accuracy(&self, data: &[Labeled]) -> f64 {
        let hits = data
            .iter()
            .filter(|(x, y)| self.predict(x.features()) == *y)
            .count();
        hits as f64 / data.len().max(1) as f64
    }

    /// Full-batch gradient descent on `sum_i c_i CE(x_i, y_i)`.
    fn fit(&mut self, data: &[(&SamplePoint, usize, f64)], learning_rate: f64, iterations: usize) {
        let d = self.input_dim;
        let mut grad = vec![0.0; self.params.len()];
        for _ in 0..iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (x, y, c) in data {
                let p = self.probabilities(x.features());
                for k in 0..self.n_classes {
                    let delta = c * (p[k] - if k == *y { 1.0 } else { 0.0 });
                    let row = &mut grad[k * (d + 1)..(k + 1) * (d + 1)];
                    for j in 0..d {
                        row[j] += delta * x.features()[j];
                    }
                    row[d] += delta;
                }
            }
            for (w, g) in self.params.iter_mut().zip(&grad) {
                *w -= learning_rate * g;
            }
        }
    }
}

/// Per-point coefficients of the weighted augmented risk.
fn risk_coefficients(
    task: &AugmentedTask,
    generated_weights: &[f64],
    config: &WeightConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = task.mixture_m;
    if m > 0.0 && task.real_labeled.is_empty() {
        return Err(Error::Empty("real partition".into()));
    }
    if m < 1.0 && task.generated_labeled.is_empty() {
        return Err(Error::Empty("generated partition".into()));
    }
    let real = if m > 0.0 {
        vec![m / task.real_labeled.len() as f64; task.real_labeled.len()]
    } else {
        vec![0.0; task.real_labeled.len()]
    };
    let generated = if m < 1.0 {
        if generated_weights.len() != task.generated_labeled.len() {
            return Err(Error::DimensionMismatch {
                expected: task.generated_labeled.len(),
                found: generated_weights.len(),
            });
        }
        let cfg = WeightConfig {
            self_normalize: true,
            ..*config
        };
        transform_weights(generated_weights, &cfg)?
            .into_iter()
            .map(|w| (1.0 - m) * w)
            .collect()
    } else {
        vec![0.0; task.generated_labeled.len()]
    };
    Ok((real, generated))
}

/// `m * mean CE(real) + (1 - m) * self-normalized weighted CE(generated)`.
pub fn weighted_augmented_risk<W>(
    task: &AugmentedTask,
    clf: &DownstreamClassifier,
    weight_fn: W,
    config: &WeightConfig,
) -> Result<f64>
where
    W: Fn(&SamplePoint, usize) -> f64,
{
    let w: Vec<f64> = task
        .generated_labeled
        .iter()
        .map(|(x, y)| weight_fn(x, *y))
        .collect();
    augmented_risk_with_weights(task, clf, &w, config)
}

/// [`weighted_augmented_risk`] with precomputed raw weights of the generated points.
pub fn augmented_risk_with_weights(
    task: &AugmentedTask,
    clf: &DownstreamClassifier,
    generated_weights: &[f64],
    config: &WeightConfig,
) -> Result<f64> {
    let (cr, cg) = risk_coefficients(task, generated_weights, config)?;
    let term = |data: &[Labeled], coef: &[f64]| -> f64 {
        data.iter()
            .zip(coef)
            .map(|((x, y), c)| c * clf.cross_entropy(x.features(), *y))
            .sum()
    };
    Ok(term(&task.real_labeled, &cr) + term(&task.generated_labeled, &cg))
}

/// Minimizes the weighted augmented risk from zero initialization.
pub fn train_downstream(
    task: &AugmentedTask,
    generated_weights: &[f64],
    config: &WeightConfig,
    learning_rate: f64,
    iterations: usize,
) -> Result<DownstreamClassifier> {
    let dim = task
        .real_labeled
        .first()
        .or(task.generated_labeled.first())
        .map(|(x, _)| x.dim())
        .ok_or_else(|| Error::Empty("augmented task".into()))?;
    let (cr, cg) = risk_coefficients(task, generated_weights, config)?;
    let data: Vec<(&SamplePoint, usize, f64)> = task
        .real_labeled
        .iter()
        .zip(&cr)
        .chain(task.generated_labeled.iter().zip(&cg))
        .filter(|(_, c)| **c > 0.0)
        .map(|((x, y), c)| (x, *y, *c))
        .collect();
    let mut clf = DownstreamClassifier::zeros(task.n_classes, dim);
    clf.fit(&data, learning_rate, iterations);
    Ok(clf)
}

/// Indices sorted by decreasing weight; ties keep their original order.
pub fn rank_generated_by_weight<W>(generated: &[SamplePoint], weight_fn: W) -> Vec<usize>
where
    W: Fn(&SamplePoint) -> f64,
{
    let w: Vec<f64> = generated.iter().map(weight_fn).collect();
    rank_by_weight(&w)
}

pub fn rank_by_weight(weights: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    idx
}

/// Two unit-covariance Gaussian classes at `(-2, 0)` and `(2, 0)`, and a
/// generator whose samples are outliers with probability `outlier_rate`:
/// an outlier is drawn from class 1 but labeled 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContaminatedToy {
    pub outlier_rate: f64,
}

impl Default for ContaminatedToy {
    fn default() -> Self {
        Self { outlier_rate: 0.3 }
    }
}

const CLASS_CENTERS: [[f64; 2]; 2] = [[-2.0, 0.0], [2.0, 0.0]];

fn std_normal_2d(x: &[f64], c: &[f64; 2]) -> f64 {
    let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
    (-0.5 * d2).exp() / (2.0 * PI)
}

fn gaussian_point(c: &[f64; 2], rng: &mut SimRng) -> SamplePoint {
    let a: f64 = StandardNormal.sample(rng);
    let b: f64 = StandardNormal.sample(rng);
    SamplePoint::new(vec![c[0] + a, c[1] + b]).expect("finite")
}

/// A generated sample with its ground-truth outlier flag.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub point: SamplePoint,
    pub label: usize,
    pub outlier: bool,
}

impl ContaminatedToy {
    /// Joint density `p(x, y)` of the real task.
    pub fn real_density(&self, x: &[f64], y: usize) -> f64 {
        0.5 * std_normal_2d(x, &CLASS_CENTERS[y])
    }

    /// Joint density `p_theta(x, y)` of the generator.
    pub fn generator_density(&self, x: &[f64], y: usize) -> f64 {
        let clean = (1.0 - self.outlier_rate) * 0.5 * std_normal_2d(x, &CLASS_CENTERS[y]);
        if y == 0 {
            clean + self.outlier_rate * std_normal_2d(x, &CLASS_CENTERS[1])
        } else {
            clean
        }
    }

    pub fn oracle_weight(&self, x: &[f64], y: usize) -> f64 {
        self.real_density(x, y) / self.generator_density(x, y)
    }

    pub fn sample_real(&self, n: usize, rng: &mut SimRng) -> Vec<Labeled> {
        (0..n)
            .map(|_| {
                let y = rng.random_range(0..2);
                (gaussian_point(&CLASS_CENTERS[y], rng), y)
            })
            .collect()
    }

    pub fn sample_generated(&self, n: usize, rng: &mut SimRng) -> Vec<GeneratedSample> {
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < self.outlier_rate {
                    GeneratedSample {
                        point: gaussian_point(&CLASS_CENTERS[1], rng),
                        label: 0,
                        outlier: true,
                    }
                } else {
                    let y = rng.random_range(0..2);
                    GeneratedSample {
                        point: gaussian_point(&CLASS_CENTERS[y], rng),
                        label: y,
                        outlier: false,
                    }
                }
            })
            .collect()
    }
}

/// Ratio-classifier input for a labeled pair: the features followed by the label.
pub fn joint_features(x: &SamplePoint, y: usize) -> SamplePoint {
    let mut v = x.features().to_vec();
    v.push(y as f64);
    SamplePoint::new(v).expect("finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentWeights {
    Unit,
    Lfiw,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub m: f64,
    pub weights: AugmentWeights,
    pub n_real: usize,
    pub n_generated: usize,
    pub n_test: usize,
    pub seed: u64,
    pub outlier_rate: f64,
    /// Ratio classifier for the `lfiw` weights; its input is `(x, y)`.
    pub train: TrainConfig,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            m: 0.5,
            weights: AugmentWeights::Oracle,
            n_real: 20,
            n_generated: 500,
            n_test: 5000,
            seed: 0,
            outlier_rate: 0.3,
            train: TrainConfig {
                hidden_units: 16,
                epochs: 100,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            learning_rate: 0.5,
            iterations: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmentResult {
    pub weights: AugmentWeights,
    pub m: f64,
    pub test_accuracy: f64,
    pub train_risk: f64,
    pub weight_ess: f64,
    /// Fraction of the lowest-weighted decile that are outliers.
    pub bottom_decile_outlier_fraction: f64,
}

/// Trains the downstream classifier on real plus weighted generated data and
/// scores it on a clean test set.
pub fn run_augmentation_experiment(config: &AugmentConfig) -> Result<AugmentResult> {
    let toy = ContaminatedToy {
        outlier_rate: config.outlier_rate,
    };
    if !(0.0..1.0).contains(&config.outlier_rate) {
        return Err(Error::config("outlier_rate must lie in [0, 1)"));
    }
    let real = toy.sample_real(config.n_real, &mut rng::stream(config.seed, "data", 0));
    let generated =
        toy.sample_generated(config.n_generated, &mut rng::stream(config.seed, "data", 1));
    let test = toy.sample_real(config.n_test, &mut rng::stream(config.seed, "data", 2));

    let weights: Vec<f64> = match config.weights {
        AugmentWeights::Unit => vec![1.0; generated.len()],
        AugmentWeights::Oracle => generated
            .iter()
            .map(|g| toy.oracle_weight(g.point.features(), g.label))
            .collect(),
        AugmentWeights::Lfiw => {
            let pos = real.iter().map(|(x, y)| joint_features(x, *y)).collect();
            let neg: Vec<SamplePoint> = generated
                .iter()
                .map(|g| joint_features(&g.point, g.label))
                .collect();
            let ds = LabeledRatioDataset::new(pos, neg)?;
            let clf = train_classifier(&ds, &config.train)?;
            let probs = clf.predict_batch(
                &generated
                    .iter()
                    .map(|g| joint_features(&g.point, g.label))
                    .collect::<Vec<_>>(),
            )?;
            probs
                .into_iter()
                .map(|c| weight_from_probability(c, ds.gamma()))
                .collect()
        }
    };
    let task = AugmentedTask::new(
        real,
        generated
            .iter()
            .map(|g| (g.point.clone(), g.label))
            .collect(),
        config.m,
        2,
    )?;
    let wc = WeightConfig::self_normalized();
    let clf = train_downstream(
        &task,
        &weights,
        &wc,
        config.learning_rate,
        config.iterations,
    )?;
    let train_risk = augmented_risk_with_weights(&task, &clf, &weights, &wc)?;

    let order = rank_by_weight(&weights);
    let decile = (generated.len() / 10).max(1);
    let bottom = &order[order.len().saturating_sub(decile)..];
    let bottom_decile_outlier_fraction =
        bottom.iter().filter(|&&i| generated[i].outlier).count() as f64 / bottom.len() as f64;

    Ok(AugmentResult {
        weights: config.weights,
        m: config.m,
        test_accuracy: clf.accuracy(&test),
        train_risk,
        weight_ess: crate::estimators::effective_sample_size(&weights),
        bottom_decile_outlier_fraction,
    })
}

/// Runs `f(seed)` for each seed, in parallel.
pub fn over_seeds<T, F>(seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    par::try_map_indexed(seeds.len(), |i| f(seeds[i]))
}
