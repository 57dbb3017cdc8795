//! Classifier-based density ratio estimation.
//!
//! A probabilistic binary classifier is trained to separate samples of the
//! target distribution `p` (label 1) from samples of the model `p_theta`
//! (label 0). With odds ratio `gamma = |negatives| / |positives|`, its output
//! `c(x)` yields the importance weight `gamma * c(x) / (1 - c(x))`, which equals
//! `p(x) / p_theta(x)` when the classifier is Bayes optimal.

use crate::error::{Error, Result};
use crate::par;
use crate::rng::{self, SimRng};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before forming weights.
pub const DEFAULT_CLAMP: f64 = 1e-7;

const DOCUMENT_VERSION: u32 = 1;

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// A feature vector. Always non-empty and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SamplePoint(Vec<f64>);

impl SamplePoint {
    pub fn new(features: Vec<f64>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Empty("sample point has no features".into()));
        }
        if let Some(bad) = features.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature value {bad}")));
        }
        Ok(Self(features))
    }

    /// One-coordinate point. Panics on a non-finite value.
    pub fn scalar(x: f64) -> Self {
        assert!(x.is_finite(), "non-finite scalar sample point");
        Self(vec![x])
    }

    pub fn features(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// First coordinate; the natural accessor for 1-D and symbol-valued points.
    pub fn first(&self) -> f64 {
        self.0[0]
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for SamplePoint {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        SamplePoint::new(v)
    }
}

impl From<SamplePoint> for Vec<f64> {
    fn from(p: SamplePoint) -> Self {
        p.0
    }
}

fn common_dim<'a>(points: impl IntoIterator<Item = &'a SamplePoint>) -> Result<Option<usize>> {
    let mut dim = None;
    for p in points {
        match dim {
            None => dim = Some(p.dim()),
            Some(d) if d != p.dim() => {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: p.dim(),
                })
            }
            _ => {}
        }
    }
    Ok(dim)
}

/// Positives drawn from `p` (label 1) and negatives from `p_theta` (label 0).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRatioDataset {
    positives: Vec<SamplePoint>,
    negatives: Vec<SamplePoint>,
    gamma: f64,
}

impl LabeledRatioDataset {
    /// Builds the dataset with `gamma` fixed from the full class sizes.
    pub fn new(positives: Vec<SamplePoint>, negatives: Vec<SamplePoint>) -> Result<Self> {
        let gamma = if positives.is_empty() {
            0.0
        } else {
            negatives.len() as f64 / positives.len() as f64
        };
        Self::with_gamma(positives, negatives, gamma)
    }

    pub fn with_gamma(
        positives: Vec<SamplePoint>,
        negatives: Vec<SamplePoint>,
        gamma: f64,
    ) -> Result<Self> {
        if positives.is_empty() {
            return Err(Error::Empty("no positive (target) samples".into()));
        }
        if negatives.is_empty() {
            return Err(Error::Empty("no negative (model) samples".into()));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        common_dim(positives.iter().chain(negatives.iter()))?;
        Ok(Self {
            positives,
            negatives,
            gamma,
        })
    }

    pub fn positives(&self) -> &[SamplePoint] {
        &self.positives
    }

    pub fn negatives(&self) -> &[SamplePoint] {
        &self.negatives
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn input_dim(&self) -> usize {
        self.positives[0].dim()
    }

    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Iterator over `(point, label)` with positives first.
    pub fn labeled(&self) -> impl Iterator<Item = (&SamplePoint, f64)> {
        self.positives
            .iter()
            .map(|p| (p, 1.0))
            .chain(self.negatives.iter().map(|p| (p, 0.0)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Affine map followed by a sigmoid.
    Logistic,
    /// One tanh hidden layer, affine output, sigmoid.
    Mlp,
}

/// A trained probabilistic binary classifier `c(x)`.
///
/// Parameter layout: logistic `[w_0 .. w_{d-1}, b]`; mlp
/// `[W1 (hidden x d, row major), b1 (hidden), w2 (hidden), b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbClassifier {
    architecture: Architecture,
    input_dim: usize,
    hidden_units: usize,
    weights: Vec<f64>,
    clamp: f64,
}

/// Versioned on-disk form of a classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierDocument {
    pub version: u32,
    pub architecture: Architecture,
    pub input_dim: usize,
    pub hidden_units: usize,
    pub weights: Vec<f64>,
    pub clamp: f64,
}

fn param_count(arch: Architecture, input_dim: usize, hidden: usize) -> usize {
    match arch {
        Architecture::Logistic => input_dim + 1,
        Architecture::Mlp => hidden * input_dim + 2 * hidden + 1,
    }
}

impl ProbClassifier {
    pub fn from_parts(
        architecture: Architecture,
        input_dim: usize,
        hidden_units: usize,
        weights: Vec<f64>,
        clamp: f64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::config("classifier input_dim must be positive"));
        }
        if architecture == Architecture::Mlp && hidden_units == 0 {
            return Err(Error::config(
                "mlp classifier needs at least one hidden unit",
            ));
        }
        let hidden_units = if architecture == Architecture::Logistic {
            0
        } else {
            hidden_units
        };
        let expected = param_count(architecture, input_dim, hidden_units);
        if weights.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("classifier parameter".into()));
        }
        if !(clamp > 0.0 && clamp < 0.5) {
            return Err(Error::config(format!(
                "clamp must lie in (0, 0.5), got {clamp}"
            )));
        }
        Ok(Self {
            architecture,
            input_dim,
            hidden_units,
            weights,
            clamp,
        })
    }

    /// Logistic classifier `sigmoid(coefficients . x + bias)`.
    pub fn logistic(coefficients: Vec<f64>, bias: f64) -> Result<Self> {
        let d = coefficients.len();
        let mut w = coefficients;
        w.push(bias);
        Self::from_parts(Architecture::Logistic, d, 0, w, DEFAULT_CLAMP)
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden_units
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: x.len(),
            });
        }
        Ok(())
    }

    fn logit_unchecked(&self, x: &[f64]) -> f64 {
        let d = self.input_dim;
        match self.architecture {
            Architecture::Logistic => {
                let (w, b) = self.weights.split_at(d);
                dot(w, x) + b[0]
            }
            Architecture::Mlp => {
                let h = self.hidden_units;
                let (w1, rest) = self.weights.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                let mut z = b2[0];
                for k in 0..h {
                    let a = dot(&w1[k * d..(k + 1) * d], x) + b1[k];
                    z += w2[k] * tanh(a);
                }
                z
            }
        }
    }

    /// Pre-sigmoid score.
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.logit_unchecked(x))
    }

    /// Probability that `x` came from the target distribution, clamped to
    /// `[clamp, 1 - clamp]`.
    pub fn predict_proba(&self, x: &SamplePoint) -> Result<f64> {
        self.predict_proba_slice(x.features())
    }

    pub fn predict_proba_slice(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(sigmoid(self.logit_unchecked(x)).clamp(self.clamp, 1.0 - self.clamp))
    }

    pub fn predict_batch(&self, xs: &[SamplePoint]) -> Result<Vec<f64>> {
        par::map_slice(xs, |x| self.predict_proba(x))
            .into_iter()
            .collect()
    }

    /// Hidden-layer activations of an mlp; `None` for a logistic model.
    pub fn hidden_activations(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        self.check_dim(x)?;
        if self.architecture != Architecture::Mlp {
            return Ok(None);
        }
        let (d, h) = (self.input_dim, self.hidden_units);
        let (w1, rest) = self.weights.split_at(h * d);
        let b1 = &rest[..h];
        Ok(Some(
            (0..h)
                .map(|k| tanh(dot(&w1[k * d..(k + 1) * d], x) + b1[k]))
                .collect(),
        ))
    }

    pub fn to_document(&self) -> ClassifierDocument {
        ClassifierDocument {
            version: DOCUMENT_VERSION,
            architecture: self.architecture,
            input_dim: self.input_dim,
            hidden_units: self.hidden_units,
            weights: self.weights.clone(),
            clamp: self.clamp,
        }
    }

    pub fn from_document(doc: ClassifierDocument) -> Result<Self> {
        if doc.version != DOCUMENT_VERSION {
            return Err(Error::config(format!(
                "unsupported classifier document version {}",
                doc.version
            )));
        }
        Self::from_parts(
            doc.architecture,
            doc.input_dim,
            doc.hidden_units,
            doc.weights,
            doc.clamp,
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `tanh` through a single `exp`; faster than the libm routine and accurate
/// to a few ulps in absolute terms.
fn tanh(a: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * a).exp() + 1.0)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `gamma * c / (1 - c)`.
pub fn weight_from_probability(c: f64, gamma: f64) -> f64 {
    gamma * c / (1.0 - c)
}

/// Inverse of [`weight_from_probability`]: `w / (gamma + w)`.
pub fn probability_from_weight(w: f64, gamma: f64) -> f64 {
    w / (gamma + w)
}

/// Classifier-implied likelihood ratio at `x`.
pub fn importance_weight(clf: &ProbClassifier, gamma: f64, x: &SamplePoint) -> Result<f64> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(weight_from_probability(clf.predict_proba(x)?, gamma))
}

/// Weights for a batch of points.
pub fn importance_weights(
    clf: &ProbClassifier,
    gamma: f64,
    xs: &[SamplePoint],
) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(clf
        .predict_batch(xs)?
        .into_iter()
        .map(|c| weight_from_probability(c, gamma))
        .collect())
}

/// Logs a warning when any weight exceeds `threshold` and returns how many did.
///
/// Huge weights usually mean the model misses part of the target's support.
pub fn warn_large_weights(weights: &[f64], threshold: f64) -> usize {
    let n = weights.iter().filter(|&&w| w > threshold).count();
    if n > 0 {
        let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        log::warn!(
            "{n} of {} importance weights exceed {threshold} (max {max}); the model may not cover the target support",
            weights.len()
        );
    }
    n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Gradient descent with heavy-ball momentum.
    Sgd,
    /// Adam with the usual `(0.9, 0.999, 1e-8)` constants; `momentum` is ignored.
    Adam,
}

/// Mini-batch first-order training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Architecture,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_units: usize,
    pub l2_penalty: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Mlp,
            optimizer: Optimizer::Sgd,
            learning_rate: 1e-2,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            hidden_units: 100,
            l2_penalty: 0.0,
            momentum: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn logistic() -> Self {
        Self {
            architecture: Architecture::Logistic,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.architecture == Architecture::Mlp && self.hidden_units == 0 {
            return Err(Error::config("hidden_units must be positive"));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::config("l2_penalty must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Per-parameter gradient of the mean cross-entropy over a mini-batch.
struct GradientBuffer {
    grad: Vec<f64>,
    hidden: Vec<f64>,
}

impl GradientBuffer {
    fn new(n_params: usize, hidden: usize) -> Self {
        Self {
            grad: vec![0.0; n_params],
            hidden: vec![0.0; hidden],
        }
    }

    /// Accumulates the gradient of one example and returns its loss.
    fn accumulate(&mut self, clf: &ProbClassifier, x: &[f64], y: f64) -> f64 {
        let d = clf.input_dim;
        match clf.architecture {
            Architecture::Logistic => {
                let z = clf.logit_unchecked(x);
                let delta = sigmoid(z) - y;
                for j in 0..d {
                    self.grad[j] += delta * x[j];
                }
                self.grad[d] += delta;
                softplus(z) - y * z
            }
            Architecture::Mlp => {
                let h = clf.hidden_units;
                let w = &clf.weights;
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(h);
                let mut z = b2[0];
                for k in 0..h {
                    let a = dot(&w1[k * d..(k + 1) * d], x) + b1[k];
                    let t = tanh(a);
                    self.hidden[k] = t;
                    z += w2[k] * t;
                }
                let delta = sigmoid(z) - y;
                let (g_w1, g_rest) = self.grad.split_at_mut(h * d);
                let (g_b1, g_rest) = g_rest.split_at_mut(h);
                let (g_w2, g_b2) = g_rest.split_at_mut(h);
                g_b2[0] += delta;
                for k in 0..h {
                    let t = self.hidden[k];
                    g_w2[k] += delta * t;
                    let back = delta * w2[k] * (1.0 - t * t);
                    g_b1[k] += back;
                    let row = &mut g_w1[k * d..(k + 1) * d];
                    for j in 0..d {
                        row[j] += back * x[j];
                    }
                }
                softplus(z) - y * z
            }
        }
    }

    fn reset(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Mask of parameters subject to the l2 penalty (everything but biases).
fn penalized_mask(arch: Architecture, d: usize, h: usize) -> Vec<bool> {
    match arch {
        Architecture::Logistic => {
            let mut m = vec![true; d + 1];
            m[d] = false;
            m
        }
        Architecture::Mlp => {
            let mut m = vec![true; h * d];
            m.extend(std::iter::repeat_n(false, h));
            m.extend(std::iter::repeat_n(true, h));
            m.push(false);
            m
        }
    }
}

fn initialize(arch: Architecture, d: usize, h: usize, rng: &mut SimRng) -> Vec<f64> {
    let uniform = |fan_in: usize, rng: &mut SimRng| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        rng.random_range(-bound..=bound)
    };
    match arch {
        Architecture::Logistic => (0..=d).map(|_| uniform(d, rng)).collect(),
        Architecture::Mlp => {
            let mut w: Vec<f64> = (0..h * d + h).map(|_| uniform(d, rng)).collect();
            w.extend((0..=h).map(|_| uniform(h, rng)));
            w
        }
    }
}

/// Trains by mini-batch gradient descent with momentum on binary
/// cross-entropy. Returns the classifier and the mean loss of every epoch.
pub fn train_classifier_with_history(
    dataset: &LabeledRatioDataset,
    config: &TrainConfig,
) -> Result<(ProbClassifier, Vec<f64>)> {
    config.validate()?;
    let d = dataset.input_dim();
    let h = match config.architecture {
        Architecture::Logistic => 0,
        Architecture::Mlp => config.hidden_units,
    };
    let mut init_rng = rng::stream(config.seed, "init", 0);
    let clf = ProbClassifier {
        architecture: config.architecture,
        input_dim: d,
        hidden_units: h,
        weights: initialize(config.architecture, d, h, &mut init_rng),
        clamp: DEFAULT_CLAMP,
    };
    descend(clf, dataset, config)
}

/// Continues training from `start` instead of a fresh initialization.
///
/// `config.architecture` and `hidden_units` are taken from `start`.
pub fn train_classifier_from(
    start: &ProbClassifier,
    dataset: &LabeledRatioDataset,
    config: &TrainConfig,
) -> Result<ProbClassifier> {
    config.validate()?;
    if dataset.input_dim() != start.input_dim {
        return Err(Error::DimensionMismatch {
            expected: start.input_dim,
            found: dataset.input_dim(),
        });
    }
    descend(start.clone(), dataset, config).map(|(c, _)| c)
}

fn descend(
    mut clf: ProbClassifier,
    dataset: &LabeledRatioDataset,
    config: &TrainConfig,
) -> Result<(ProbClassifier, Vec<f64>)> {
    let (d, h) = (clf.input_dim, clf.hidden_units);
    let examples: Vec<(&[f64], f64)> = dataset.labeled().map(|(p, y)| (p.features(), y)).collect();
    let n = examples.len();
    let mask = penalized_mask(clf.architecture, d, h);
    let mut velocity = vec![0.0; clf.weights.len()];
    let mut second = vec![0.0; clf.weights.len()];
    let mut step = 0i32;
    let mut buffer = GradientBuffer::new(clf.weights.len(), h);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = rng::stream(config.seed, "shuffle", 0);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            buffer.reset();
            for &i in batch {
                let (x, y) = examples[i];
                epoch_loss += buffer.accumulate(&clf, x, y);
            }
            let scale = 1.0 / batch.len() as f64;
            step += 1;
            let (c1, c2) = (1.0 - ADAM_B1.powi(step), 1.0 - ADAM_B2.powi(step));
            for (k, w) in clf.weights.iter_mut().enumerate() {
                let mut g = buffer.grad[k] * scale;
                if mask[k] {
                    g += config.l2_penalty * *w;
                }
                match config.optimizer {
                    Optimizer::Sgd => {
                        velocity[k] = config.momentum * velocity[k] - config.learning_rate * g;
                        *w += velocity[k];
                    }
                    Optimizer::Adam => {
                        velocity[k] = ADAM_B1 * velocity[k] + (1.0 - ADAM_B1) * g;
                        second[k] = ADAM_B2 * second[k] + (1.0 - ADAM_B2) * g * g;
                        let m_hat = velocity[k] / c1;
                        let v_hat = second[k] / c2;
                        *w -= config.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        let mean_loss = epoch_loss / n as f64;
        if !mean_loss.is_finite() || clf.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergent { epoch });
        }
        history.push(mean_loss);
    }
    Ok((clf, history))
}

/// Trains a classifier separating the dataset's positives from its negatives.
/// Deterministic given `(dataset, config)`.
pub fn train_classifier(
    dataset: &LabeledRatioDataset,
    config: &TrainConfig,
) -> Result<ProbClassifier> {
    train_classifier_with_history(dataset, config).map(|(c, _)| c)
}

/// Mean binary cross-entropy of `clf` on `dataset` (no penalty term).
pub fn cross_entropy(clf: &ProbClassifier, dataset: &LabeledRatioDataset) -> Result<f64> {
    let mut total = 0.0;
    for (p, y) in dataset.labeled() {
        let z = clf.logit(p.features())?;
        total += softplus(z) - y * z;
    }
    Ok(total / dataset.len() as f64)
}

/// Bayes-optimal probability `p / (p + gamma p_theta)` from two density values.
///
/// Points outside the target support (`p = 0`) get probability 0, i.e. weight 0.
pub fn bayes_optimal_probability(p: f64, p_theta: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::config(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    if p < 0.0 || p_theta < 0.0 || !p.is_finite() || !p_theta.is_finite() {
        return Err(Error::NonFinite(
            "density values must be finite and >= 0".into(),
        ));
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p_theta == 0.0 {
        return Err(Error::SupportViolation { index: 0 });
    }
    Ok(p / (p + gamma * p_theta))
}

/// The classifier an infinitely well trained model would converge to, built
/// from two pointwise-evaluable densities.
pub struct BayesOptimalClassifier<P, Q> {
    target_density: P,
    model_density: Q,
    gamma: f64,
}

impl<P, Q> BayesOptimalClassifier<P, Q>
where
    P: Fn(&SamplePoint) -> f64,
    Q: Fn(&SamplePoint) -> f64,
{
    pub fn new(target_density: P, model_density: Q, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::config(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        Ok(Self {
            target_density,
            model_density,
            gamma,
        })
    }

    pub fn probability(&self, x: &SamplePoint) -> Result<f64> {
        bayes_optimal_probability(
            (self.target_density)(x),
            (self.model_density)(x),
            self.gamma,
        )
    }

    /// Implied weight `gamma c / (1 - c)`, which equals `p / p_theta`.
    pub fn weight(&self, x: &SamplePoint) -> Result<f64> {
        self.probability(x)
            .map(|c| weight_from_probability(c, self.gamma))
    }
}

/// One probability bin of a reliability diagram.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationBin {
    pub low: f64,
    pub high: f64,
    /// `None` for an empty bin.
    pub mean_confidence: Option<f64>,
    pub positive_fraction: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    /// Count-weighted mean |confidence - accuracy|.
    pub ece: f64,
}

impl CalibrationReport {
    pub fn bin_edges(&self) -> Vec<f64> {
        let mut edges: Vec<f64> = self.bins.iter().map(|b| b.low).collect();
        if let Some(last) = self.bins.last() {
            edges.push(last.high);
        }
        edges
    }

    pub fn total_count(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `bin_low,bin_high,mean_conf,frac_pos,count`; empty bins leave the
    /// two averages blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,mean_conf,frac_pos,count\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.bins {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.low,
                b.high,
                opt(b.mean_confidence),
                opt(b.positive_fraction),
                b.count
            ));
        }
        out
    }
}

/// Reliability statistics over uniform-width bins on `[0, 1]`.
pub fn calibration_from_predictions(
    probs: &[f64],
    labels: &[bool],
    n_bins: usize,
) -> Result<CalibrationReport> {
    if n_bins < 2 {
        return Err(Error::config("calibration needs at least 2 bins"));
    }
    if probs.is_empty() {
        return Err(Error::Empty("calibration evaluation set".into()));
    }
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: probs.len(),
            found: labels.len(),
        });
    }
    let mut conf_sum = vec![0.0; n_bins];
    let mut pos = vec![0usize; n_bins];
    let mut count = vec![0usize; n_bins];
    for (&p, &y) in probs.iter().zip(labels) {
        let k = ((p * n_bins as f64).floor() as usize).min(n_bins - 1);
        conf_sum[k] += p;
        count[k] += 1;
        if y {
            pos[k] += 1;
        }
    }
    let total = probs.len() as f64;
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|k| {
            let (mean_confidence, positive_fraction) = if count[k] > 0 {
                let c = conf_sum[k] / count[k] as f64;
                let f = pos[k] as f64 / count[k] as f64;
                ece += count[k] as f64 / total * (c - f).abs();
                (Some(c), Some(f))
            } else {
                (None, None)
            };
            CalibrationBin {
                low: k as f64 / n_bins as f64,
                high: (k + 1) as f64 / n_bins as f64,
                mean_confidence,
                positive_fraction,
                count: count[k],
            }
        })
        .collect();
    Ok(CalibrationReport { bins, ece })
}

/// Calibration of `clf` on a held-out labeled set.
pub fn calibration_report(
    clf: &ProbClassifier,
    eval_set: &LabeledRatioDataset,
    n_bins: usize,
) -> Result<CalibrationReport> {
    let mut probs = clf.predict_batch(eval_set.positives())?;
    probs.extend(clf.predict_batch(eval_set.negatives())?);
    let labels: Vec<bool> = eval_set.labeled().map(|(_, y)| y == 1.0).collect();
    calibration_from_predictions(&probs, &labels, n_bins)
}
