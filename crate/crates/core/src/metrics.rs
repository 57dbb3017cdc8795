//! Sample-quality metrics in a feature space, with optional per-point weights
//! on either side.

use crate::error::{Error, Result};
use crate::estimators::{effective_sample_size, transform_weights, WeightConfig};
use crate::par;
use crate::ratio::{Architecture, ProbClassifier, SamplePoint};
use crate::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config("weights must be finite and >= 0"));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    Ok(())
}

fn normalize(weights: Option<&[f64]>, n: usize) -> Vec<f64> {
    match weights {
        Some(w) => {
            let total: f64 = w.iter().sum();
            w.iter().map(|x| x / total).collect()
        }
        None => vec![1.0 / n as f64; n],
    }
}

/// Points in feature space, one per row, with optional weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    rows: DMatrix<f64>,
    weights: Option<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Empty("feature rows".into()));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::Empty("feature columns".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: r.len(),
            });
        }
        Self::from_matrix(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
    }

    pub fn from_matrix(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::Empty("feature matrix".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature".into()));
        }
        Ok(Self {
            rows,
            weights: None,
        })
    }

    pub fn from_points(points: &[SamplePoint]) -> Result<Self> {
        Self::new(points.iter().map(|p| p.features().to_vec()).collect())
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        check_weights(&weights, self.len())?;
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn without_weights(mut self) -> Self {
        self.weights = None;
        self
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Weights rescaled to sum to 1; uniform when none are attached.
    pub fn normalized_weights(&self) -> Vec<f64> {
        normalize(self.weights.as_deref(), self.len())
    }

    pub fn mean(&self) -> DVector<f64> {
        let w = self.normalized_weights();
        let mut m = DVector::zeros(self.dim());
        for (i, wi) in w.iter().enumerate() {
            m += self.rows.row(i).transpose() * *wi;
        }
        m
    }

    /// Weighted covariance, dividing by the total weight.
    pub fn covariance(&self) -> DMatrix<f64> {
        let w = self.normalized_weights();
        let m = self.mean();
        let mut c = DMatrix::zeros(self.dim(), self.dim());
        for (i, wi) in w.iter().enumerate() {
            let d = self.rows.row(i).transpose() - &m;
            c += &d * d.transpose() * *wi;
        }
        c
    }
}

/// Per-point class probabilities with optional weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDistribution {
    rows: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
}

impl LabelDistribution {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("label rows".into()));
        }
        let k = rows[0].len();
        if k < 2 {
            return Err(Error::config("label distributions need at least 2 classes"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::DimensionMismatch {
                    expected: k,
                    found: r.len(),
                });
            }
            if r.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::config(format!("label row {i} has a negative entry")));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("label row {i} sums to {s}")));
            }
        }
        Ok(Self {
            rows,
            weights: None,
        })
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        check_weights(&weights, self.rows.len())?;
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn marginal(&self) -> Vec<f64> {
        let w = normalize(self.weights.as_deref(), self.len());
        let mut m = vec![0.0; self.n_classes()];
        for (row, wi) in self.rows.iter().zip(&w) {
            for (mk, p) in m.iter_mut().zip(row) {
                *mk += wi * p;
            }
        }
        m
    }
}

/// `exp(E_x[KL(d(y|x) || d(y))])` with the marginal and the average taken
/// under the same weights.
pub fn inception_style_score(preds: &LabelDistribution) -> Result<f64> {
    let w = normalize(preds.weights.as_deref(), preds.len());
    let marg = preds.marginal();
    let mut total = 0.0;
    for (i, (row, wi)) in preds.rows.iter().zip(&w).enumerate() {
        if *wi == 0.0 {
            continue;
        }
        let mut kl = 0.0;
        for (p, q) in row.iter().zip(&marg) {
            if *p == 0.0 {
                continue;
            }
            if *q == 0.0 {
                return Err(Error::SupportViolation { index: i });
            }
            kl += p * (p / q).ln();
        }
        total += wi * kl;
    }
    Ok(total.exp().clamp(1.0, preds.n_classes() as f64))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr sqrt(A B) = tr sqrt(A^1/2 B A^1/2), and the latter is symmetric.
    let ra = psd_sqrt(a);
    let inner = &ra * b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    sym.symmetric_eigenvalues()
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum()
}

fn same_dim(s: &FeatureSet, r: &FeatureSet) -> Result<()> {
    if s.dim() != r.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            found: r.dim(),
        });
    }
    Ok(())
}

/// `|mu_s - mu_r|^2 + tr(C_s + C_r - 2 (C_s C_r)^1/2)`, clipped at 0.
pub fn frechet_distance(s: &FeatureSet, r: &FeatureSet) -> Result<f64> {
    same_dim(s, r)?;
    if s.len() < 2 || r.len() < 2 {
        return Err(Error::config(
            "frechet distance needs at least 2 points per set",
        ));
    }
    let dm = (s.mean() - r.mean()).norm_squared();
    let cs = s.covariance();
    let cr = r.covariance();
    let value = dm + cs.trace() + cr.trace() - 2.0 * trace_sqrt_product(&cs, &cr);
    Ok(value.max(0.0))
}

fn rbf(a: &[f64], b: &[f64], inv_two_bw2: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-d2 * inv_two_bw2).exp()
}

fn row_vecs(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// `sum_{i != j} a_i b_j k(x_i, y_j)` (all pairs when `skip_diagonal` is false),
/// reduced row by row in index order.
fn kernel_sum(
    x: &[Vec<f64>],
    a: &[f64],
    y: &[Vec<f64>],
    b: &[f64],
    skip_diagonal: bool,
    inv: f64,
) -> f64 {
    par::map_indexed(x.len(), |i| {
        let mut acc = 0.0;
        for (j, yj) in y.iter().enumerate() {
            if skip_diagonal && i == j {
                continue;
            }
            acc += b[j] * rbf(&x[i], yj, inv);
        }
        a[i] * acc
    })
    .iter()
    .sum()
}

/// Unbiased squared MMD with an RBF kernel.
///
/// With weights the within-set terms are `sum_{i != j} w_i w_j k_ij` over
/// `sum_{i != j} w_i w_j`; unit weights give the usual U-statistic.
pub fn kernel_distance(s: &FeatureSet, r: &FeatureSet, bandwidth: f64) -> Result<f64> {
    same_dim(s, r)?;
    if s.len() < 2 || r.len() < 2 {
        return Err(Error::config(
            "kernel distance needs at least 2 points per set",
        ));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::config(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let (xs, ys) = (row_vecs(&s.rows), row_vecs(&r.rows));
    let (a, b) = (s.normalized_weights(), r.normalized_weights());
    let off_mass = |w: &[f64]| 1.0 - w.iter().map(|x| x * x).sum::<f64>();
    let (ma, mb) = (off_mass(&a), off_mass(&b));
    if ma <= 0.0 || mb <= 0.0 {
        return Err(Error::config(
            "kernel distance needs weight on at least 2 points per set",
        ));
    }
    let xx = kernel_sum(&xs, &a, &xs, &a, true, inv) / ma;
    let yy = kernel_sum(&ys, &b, &ys, &b, true, inv) / mb;
    let xy = kernel_sum(&xs, &a, &ys, &b, false, inv);
    Ok(xx + yy - 2.0 * xy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSuite {
    pub is_raw: Option<f64>,
    pub is_lfiw: Option<f64>,
    pub fid_raw: f64,
    pub fid_lfiw: f64,
    pub kid_raw: f64,
    pub kid_lfiw: f64,
    /// Effective sample size of the transformed model-side weights.
    pub weight_ess: f64,
}

/// Every metric with unit weights and with transformed weights on the model side.
///
/// `raw_weights[i]` belongs to model point `i` (and to row `i` of `model_preds`).
/// The real side is always unweighted.
pub fn debiased_metric_suite(
    model: &FeatureSet,
    real: &FeatureSet,
    model_preds: Option<&LabelDistribution>,
    raw_weights: &[f64],
    config: &WeightConfig,
    bandwidth: f64,
) -> Result<MetricSuite> {
    if raw_weights.len() != model.len() {
        return Err(Error::DimensionMismatch {
            expected: model.len(),
            found: raw_weights.len(),
        });
    }
    let w = transform_weights(raw_weights, config)?;
    let plain = model.clone().without_weights();
    let weighted = plain.clone().with_weights(w.clone())?;
    let real = real.clone().without_weights();
    let (is_raw, is_lfiw) = match model_preds {
        Some(p) => {
            if p.len() != model.len() {
                return Err(Error::DimensionMismatch {
                    expected: model.len(),
                    found: p.len(),
                });
            }
            let unweighted = LabelDistribution {
                rows: p.rows.clone(),
                weights: None,
            };
            (
                Some(inception_style_score(&unweighted)?),
                Some(inception_style_score(&unweighted.with_weights(w.clone())?)?),
            )
        }
        None => (None, None),
    };
    Ok(MetricSuite {
        is_raw,
        is_lfiw,
        fid_raw: frechet_distance(&plain, &real)?,
        fid_lfiw: frechet_distance(&weighted, &real)?,
        kid_raw: kernel_distance(&plain, &real, bandwidth)?,
        kid_lfiw: kernel_distance(&weighted, &real, bandwidth)?,
        weight_ess: effective_sample_size(&w),
    })
}

/// Maps raw inputs to the space the metrics are computed in.
pub trait FeatureExtractor: Sync {
    fn output_dim(&self) -> usize;
    fn extract(&self, x: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy)]
pub struct IdentityExtractor {
    pub dim: usize,
}

impl FeatureExtractor for IdentityExtractor {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(x.to_vec())
    }
}

/// Fixed Gaussian projection with entries `N(0, 1/out)`.
#[derive(Debug, Clone)]
pub struct RandomProjection {
    matrix: DMatrix<f64>,
}

impl RandomProjection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::config("projection dimensions must be positive"));
        }
        let mut rng = rng::stream(seed, "projection", 0);
        let scale = 1.0 / (output_dim as f64).sqrt();
        let matrix = DMatrix::from_fn(output_dim, input_dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal) * scale
        });
        Ok(Self { matrix })
    }
}

impl FeatureExtractor for RandomProjection {
    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.matrix.ncols(),
                found: x.len(),
            });
        }
        Ok((&self.matrix * DVector::from_column_slice(x))
            .iter()
            .copied()
            .collect())
    }
}

/// Hidden tanh layer of a trained network classifier.
#[derive(Debug, Clone)]
pub struct HiddenLayerExtractor {
    classifier: ProbClassifier,
}

impl HiddenLayerExtractor {
    pub fn new(classifier: ProbClassifier) -> Result<Self> {
        if classifier.architecture() != Architecture::Mlp {
            return Err(Error::config(
                "hidden-layer features need an mlp classifier",
            ));
        }
        Ok(Self { classifier })
    }
}

impl FeatureExtractor for HiddenLayerExtractor {
    fn output_dim(&self) -> usize {
        self.classifier.hidden_units()
    }

    fn extract(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.classifier
            .hidden_activations(x)?
            .ok_or_else(|| Error::config("classifier has no hidden layer"))
    }
}

pub fn extract_features<E: FeatureExtractor + ?Sized>(
    extractor: &E,
    points: &[SamplePoint],
) -> Result<FeatureSet> {
    let rows = par::try_map_indexed(points.len(), |i| extractor.extract(points[i].features()))?;
    FeatureSet::new(rows)
}
