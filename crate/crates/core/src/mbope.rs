//! Model-based off-policy evaluation with learned transition weights.
//!
//! States and actions are stored as `Vec<f64>`; in the tabular case a state
//! or action is a single coordinate holding its index.

use crate::error::{Error, Result};
use crate::estimators::{estimate_from_values, WeightConfig};
use crate::par;
use crate::ratio::{
    train_classifier, Architecture, LabeledRatioDataset, Optimizer, ProbClassifier, SamplePoint,
    TrainConfig,
};
use crate::rng::{self, SimRng};
use crate::sampling::CategoricalSampler;
use crate::stats;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

const ROW_TOL: f64 = 1e-12;

fn index(x: &[f64]) -> usize {
    x[0] as usize
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    if r == 0 {
        return Err(Error::Empty(what.to_string()));
    }
    let c = rows[0].len();
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::config(format!("{what} rows have unequal lengths")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::config(format!(
            "{what} has a negative or non-finite entry"
        )));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > ROW_TOL {
        return Err(Error::config(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Multivariate normal with a cached Cholesky factor.
#[derive(Debug, Clone)]
struct Gaussian {
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    log_det: f64,
}

impl Gaussian {
    fn new(cov: DMatrix<f64>, what: &str) -> Result<Self> {
        if !cov.is_square() {
            return Err(Error::config(format!("{what} must be square")));
        }
        let asym = (&cov - cov.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + cov.abs().max()) {
            return Err(Error::config(format!("{what} must be symmetric")));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::config(format!("{what} must be positive definite")))?
            .l();
        let log_det = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { cov, chol, log_det })
    }

    fn dim(&self) -> usize {
        self.cov.nrows()
    }

    fn draw(&self, mean: &DVector<f64>, rng: &mut SimRng) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        mean + &self.chol * z
    }

    fn log_density(&self, x: &DVector<f64>, mean: &DVector<f64>) -> f64 {
        let y = self
            .chol
            .solve_lower_triangular(&(x - mean))
            .expect("cholesky factor has a positive diagonal");
        -0.5 * (self.dim() as f64 * (2.0 * PI).ln() + self.log_det + y.norm_squared())
    }
}

/// Finite-state transition kernel, `probs[a][s][s']`.
#[derive(Debug, Clone)]
pub struct TabularDynamics {
    n_states: usize,
    n_actions: usize,
    probs: Vec<Vec<Vec<f64>>>,
    samplers: Vec<CategoricalSampler>,
}

impl TabularDynamics {
    pub fn new(probs: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let n_actions = probs.len();
        if n_actions == 0 {
            return Err(Error::Empty("transition matrices".into()));
        }
        let n_states = probs[0].len();
        if n_states == 0 {
            return Err(Error::Empty("transition matrix rows".into()));
        }
        let mut samplers = Vec::with_capacity(n_actions * n_states);
        for (a, m) in probs.iter().enumerate() {
            if m.len() != n_states {
                return Err(Error::DimensionMismatch {
                    expected: n_states,
                    found: m.len(),
                });
            }
            for (s, row) in m.iter().enumerate() {
                if row.len() != n_states {
                    return Err(Error::DimensionMismatch {
                        expected: n_states,
                        found: row.len(),
                    });
                }
                check_row(row, &format!("transition row (a={a}, s={s})"))?;
                samplers.push(CategoricalSampler::new(row)?);
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            probs,
            samplers,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn probs(&self) -> &[Vec<Vec<f64>>] {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.probs[a][s][next]
    }

    fn draw(&self, s: usize, a: usize, rng: &mut SimRng) -> usize {
        self.samplers[a * self.n_states + s].sample_index(rng)
    }

    /// Mix every row with the uniform distribution: `(1 - eps) P + eps / |S|`.
    pub fn corrupted(&self, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::config(format!(
                "corruption must lie in [0, 1], got {eps}"
            )));
        }
        let u = 1.0 / self.n_states as f64;
        Self::new(
            self.probs
                .iter()
                .map(|m| {
                    m.iter()
                        .map(|row| row.iter().map(|p| (1.0 - eps) * p + eps * u).collect())
                        .collect()
                })
                .collect(),
        )
    }
}

/// `s' = A s + B a + N(0, sigma)`.
#[derive(Debug, Clone)]
pub struct LinearDynamics {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    noise: Gaussian,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = a.nrows();
        if d == 0 || !a.is_square() {
            return Err(Error::config("A must be a non-empty square matrix"));
        }
        if b.nrows() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: b.nrows(),
            });
        }
        if sigma.nrows() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: sigma.nrows(),
            });
        }
        let noise = Gaussian::new(sigma, "sigma")?;
        Ok(Self { a, b, noise })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.noise.cov
    }

    fn mean(&self, s: &[f64], a: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(s) + &self.b * DVector::from_column_slice(a)
    }

    fn log_prob(&self, s: &[f64], a: &[f64], next: &[f64]) -> f64 {
        self.noise
            .log_density(&DVector::from_column_slice(next), &self.mean(s, a))
    }

    /// Shrinks `A` by `1 - eps`.
    pub fn corrupted(&self, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::config(format!(
                "corruption must lie in [0, 1], got {eps}"
            )));
        }
        Self::new(
            &self.a * (1.0 - eps),
            self.b.clone(),
            self.noise.cov.clone(),
        )
    }
}

#[derive(Debug, Clone)]
pub enum Dynamics {
    Tabular(TabularDynamics),
    LinearGaussian(LinearDynamics),
}

impl Dynamics {
    pub fn kind(&self) -> &'static str {
        match self {
            Dynamics::Tabular(_) => "tabular",
            Dynamics::LinearGaussian(_) => "linear_gaussian",
        }
    }

    /// `log P(next | s, a)`; a log mass for tabular kernels, a log density otherwise.
    pub fn log_prob(&self, s: &[f64], a: &[f64], next: &[f64]) -> f64 {
        match self {
            Dynamics::Tabular(t) => t.prob(index(s), index(a), index(next)).ln(),
            Dynamics::LinearGaussian(l) => l.log_prob(s, a, next),
        }
    }

    pub fn draw(&self, s: &[f64], a: &[f64], rng: &mut SimRng) -> Vec<f64> {
        match self {
            Dynamics::Tabular(t) => vec![t.draw(index(s), index(a), rng) as f64],
            Dynamics::LinearGaussian(l) => {
                l.noise.draw(&l.mean(s, a), rng).iter().copied().collect()
            }
        }
    }

    pub fn corrupted(&self, eps: f64) -> Result<Self> {
        Ok(match self {
            Dynamics::Tabular(t) => Dynamics::Tabular(t.corrupted(eps)?),
            Dynamics::LinearGaussian(l) => Dynamics::LinearGaussian(l.corrupted(eps)?),
        })
    }
}

/// Known reward function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticReward {
    pub state_linear: Vec<f64>,
    pub state_quadratic: Vec<f64>,
    pub action_quadratic: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reward {
    /// `table[s][a]`.
    Table(Vec<Vec<f64>>),
    /// `l . s - sum q_i s_i^2 - sum c_j a_j^2`.
    Quadratic(QuadraticReward),
}

impl Reward {
    pub fn eval(&self, s: &[f64], a: &[f64]) -> f64 {
        match self {
            Reward::Table(t) => t[index(s)][index(a)],
            Reward::Quadratic(q) => {
                let lin: f64 = q.state_linear.iter().zip(s).map(|(l, x)| l * x).sum();
                let sq: f64 = q
                    .state_quadratic
                    .iter()
                    .zip(s)
                    .map(|(c, x)| c * x * x)
                    .sum();
                let aq: f64 = q
                    .action_quadratic
                    .iter()
                    .zip(a)
                    .map(|(c, x)| c * x * x)
                    .sum();
                lin - sq - aq
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Initial {
    Categorical(Vec<f64>, CategoricalSampler),
    Gaussian(DVector<f64>, Gaussian),
}

impl Initial {
    fn draw(&self, rng: &mut SimRng) -> Vec<f64> {
        match self {
            Initial::Categorical(_, s) => vec![s.sample_index(rng) as f64],
            Initial::Gaussian(m, g) => g.draw(m, rng).iter().copied().collect(),
        }
    }

    fn log_prob(&self, s: &[f64]) -> f64 {
        match self {
            Initial::Categorical(p, _) => p[index(s)].ln(),
            Initial::Gaussian(m, g) => g.log_density(&DVector::from_column_slice(s), m),
        }
    }
}

/// Finite-horizon, undiscounted MDP.
#[derive(Debug, Clone)]
pub struct Mdp {
    dynamics: Dynamics,
    reward: Reward,
    initial: Initial,
    horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianDocument {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// On-disk form of an [`Mdp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MdpDocument {
    Tabular {
        n_states: usize,
        n_actions: usize,
        /// `transitions[a][s][s']`.
        transitions: Vec<Vec<Vec<f64>>>,
        /// `rewards[s][a]`.
        rewards: Vec<Vec<f64>>,
        eta: Vec<f64>,
        horizon: usize,
    },
    LinearGaussian {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        sigma: Vec<Vec<f64>>,
        reward: QuadraticReward,
        eta: GaussianDocument,
        horizon: usize,
    },
}

impl Mdp {
    pub fn from_document(doc: MdpDocument) -> Result<Self> {
        match doc {
            MdpDocument::Tabular {
                n_states,
                n_actions,
                transitions,
                rewards,
                eta,
                horizon,
            } => {
                let t = TabularDynamics::new(transitions)?;
                if t.n_states != n_states || t.n_actions != n_actions {
                    return Err(Error::config(format!(
                        "transitions are {}x{} but n_states={n_states}, n_actions={n_actions}",
                        t.n_states, t.n_actions
                    )));
                }
                if rewards.len() != n_states || rewards.iter().any(|r| r.len() != n_actions) {
                    return Err(Error::config("rewards must be n_states x n_actions"));
                }
                if rewards.iter().flatten().any(|r| !r.is_finite()) {
                    return Err(Error::NonFinite("reward".into()));
                }
                if eta.len() != n_states {
                    return Err(Error::DimensionMismatch {
                        expected: n_states,
                        found: eta.len(),
                    });
                }
                check_row(&eta, "eta")?;
                let sampler = CategoricalSampler::new(&eta)?;
                Self::assemble(
                    Dynamics::Tabular(t),
                    Reward::Table(rewards),
                    Initial::Categorical(eta, sampler),
                    horizon,
                )
            }
            MdpDocument::LinearGaussian {
                a,
                b,
                sigma,
                reward,
                eta,
                horizon,
            } => {
                let l = LinearDynamics::new(
                    matrix_from_rows(&a, "A")?,
                    matrix_from_rows(&b, "B")?,
                    matrix_from_rows(&sigma, "sigma")?,
                )?;
                let d = l.state_dim();
                if reward.state_linear.len() != d || reward.state_quadratic.len() != d {
                    return Err(Error::config(
                        "state reward coefficients must have length d",
                    ));
                }
                if reward.action_quadratic.len() != l.action_dim() {
                    return Err(Error::config(
                        "action reward coefficients must have length m",
                    ));
                }
                if eta.mean.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: eta.mean.len(),
                    });
                }
                let g = Gaussian::new(matrix_from_rows(&eta.cov, "eta.cov")?, "eta.cov")?;
                if g.dim() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        found: g.dim(),
                    });
                }
                Self::assemble(
                    Dynamics::LinearGaussian(l),
                    Reward::Quadratic(reward),
                    Initial::Gaussian(DVector::from_vec(eta.mean), g),
                    horizon,
                )
            }
        }
    }

    fn assemble(
        dynamics: Dynamics,
        reward: Reward,
        initial: Initial,
        horizon: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        Ok(Self {
            dynamics,
            reward,
            initial,
            horizon,
        })
    }

    pub fn to_document(&self) -> MdpDocument {
        match (&self.dynamics, &self.reward, &self.initial) {
            (Dynamics::Tabular(t), Reward::Table(r), Initial::Categorical(eta, _)) => {
                MdpDocument::Tabular {
                    n_states: t.n_states,
                    n_actions: t.n_actions,
                    transitions: t.probs.clone(),
                    rewards: r.clone(),
                    eta: eta.clone(),
                    horizon: self.horizon,
                }
            }
            (Dynamics::LinearGaussian(l), Reward::Quadratic(q), Initial::Gaussian(m, g)) => {
                MdpDocument::LinearGaussian {
                    a: matrix_to_rows(&l.a),
                    b: matrix_to_rows(&l.b),
                    sigma: matrix_to_rows(&l.noise.cov),
                    reward: q.clone(),
                    eta: GaussianDocument {
                        mean: m.iter().copied().collect(),
                        cov: matrix_to_rows(&g.cov),
                    },
                    horizon: self.horizon,
                }
            }
            _ => unreachable!("components are checked to share a kind"),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn reward(&self) -> &Reward {
        &self.reward
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn kind(&self) -> &'static str {
        self.dynamics.kind()
    }

    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        Self::assemble(
            self.dynamics.clone(),
            self.reward.clone(),
            self.initial.clone(),
            horizon,
        )
    }

    /// Same reward, initial distribution and horizon, different transitions.
    pub fn with_dynamics(&self, dynamics: Dynamics) -> Result<Self> {
        let ok = match (&self.dynamics, &dynamics) {
            (Dynamics::Tabular(a), Dynamics::Tabular(b)) => {
                a.n_states == b.n_states && a.n_actions == b.n_actions
            }
            (Dynamics::LinearGaussian(a), Dynamics::LinearGaussian(b)) => {
                a.state_dim() == b.state_dim() && a.action_dim() == b.action_dim()
            }
            _ => false,
        };
        if !ok {
            return Err(Error::config(format!(
                "{} dynamics do not fit a {} mdp of this size",
                dynamics.kind(),
                self.kind()
            )));
        }
        Ok(Self {
            dynamics,
            ..self.clone()
        })
    }

    pub fn initial_log_prob(&self, s: &[f64]) -> f64 {
        self.initial.log_prob(s)
    }
}

#[derive(Debug, Clone)]
pub enum Policy {
    /// `probs[s][a]`.
    TabularStochastic {
        probs: Vec<Vec<f64>>,
        samplers: Vec<CategoricalSampler>,
    },
    /// `a = K s + N(0, diag(noise_std^2))`.
    LinearGaussian {
        gain: DMatrix<f64>,
        noise_std: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyDocument {
    TabularStochastic {
        probs: Vec<Vec<f64>>,
    },
    LinearGaussian {
        gain: Vec<Vec<f64>>,
        noise_std: Vec<f64>,
    },
}

impl Policy {
    pub fn tabular(probs: Vec<Vec<f64>>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("policy rows".into()));
        }
        let n_actions = probs[0].len();
        let mut samplers = Vec::with_capacity(probs.len());
        for (s, row) in probs.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::DimensionMismatch {
                    expected: n_actions,
                    found: row.len(),
                });
            }
            check_row(row, &format!("policy row {s}"))?;
            samplers.push(CategoricalSampler::new(row)?);
        }
        Ok(Policy::TabularStochastic { probs, samplers })
    }

    pub fn linear(gain: DMatrix<f64>, noise_std: Vec<f64>) -> Result<Self> {
        if noise_std.len() != gain.nrows() {
            return Err(Error::DimensionMismatch {
                expected: gain.nrows(),
                found: noise_std.len(),
            });
        }
        if noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config("policy noise_std must be finite and >= 0"));
        }
        Ok(Policy::LinearGaussian { gain, noise_std })
    }

    pub fn from_document(doc: PolicyDocument) -> Result<Self> {
        match doc {
            PolicyDocument::TabularStochastic { probs } => Self::tabular(probs),
            PolicyDocument::LinearGaussian { gain, noise_std } => {
                Self::linear(matrix_from_rows(&gain, "gain")?, noise_std)
            }
        }
    }

    pub fn to_document(&self) -> PolicyDocument {
        match self {
            Policy::TabularStochastic { probs, .. } => PolicyDocument::TabularStochastic {
                probs: probs.clone(),
            },
            Policy::LinearGaussian { gain, noise_std } => PolicyDocument::LinearGaussian {
                gain: matrix_to_rows(gain),
                noise_std: noise_std.clone(),
            },
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    fn check_compatible(&self, mdp: &Mdp) -> Result<()> {
        let ok = match (self, &mdp.dynamics) {
            (Policy::TabularStochastic { probs, .. }, Dynamics::Tabular(t)) => {
                probs.len() == t.n_states && probs[0].len() == t.n_actions
            }
            (Policy::LinearGaussian { gain, .. }, Dynamics::LinearGaussian(l)) => {
                gain.nrows() == l.action_dim() && gain.ncols() == l.state_dim()
            }
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!(
                "policy does not match the {} mdp's state and action spaces",
                mdp.kind()
            )))
        }
    }

    fn draw(&self, s: &[f64], rng: &mut SimRng) -> Vec<f64> {
        match self {
            Policy::TabularStochastic { samplers, .. } => {
                vec![samplers[index(s)].sample_index(rng) as f64]
            }
            Policy::LinearGaussian { gain, noise_std } => {
                let mean = gain * DVector::from_column_slice(s);
                mean.iter()
                    .zip(noise_std)
                    .map(|(m, sd)| m + sd * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        }
    }

    /// Log probability (or density) of `a` in state `s`. Noise-free action
    /// coordinates contribute nothing.
    pub fn log_prob(&self, s: &[f64], a: &[f64]) -> f64 {
        match self {
            Policy::TabularStochastic { probs, .. } => probs[index(s)][index(a)].ln(),
            Policy::LinearGaussian { gain, noise_std } => {
                let mean = gain * DVector::from_column_slice(s);
                mean.iter()
                    .zip(noise_std)
                    .zip(a)
                    .filter(|((_, sd), _)| **sd > 0.0)
                    .map(|((m, sd), x)| {
                        let z = (x - m) / sd;
                        -0.5 * (z * z + (2.0 * PI).ln()) - sd.ln()
                    })
                    .sum()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// `rewards[t] = r(states[t], actions[t])`.
    pub rewards: Vec<f64>,
    /// Log probability accumulated step by step while simulating.
    pub log_prob: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// `(s_t, a_t, s_{t+1})` triples in time order.
    pub fn transitions(&self) -> impl Iterator<Item = (&[f64], &[f64], &[f64])> {
        (0..self.horizon()).map(move |t| {
            (
                self.states[t].as_slice(),
                self.actions[t].as_slice(),
                self.states[t + 1].as_slice(),
            )
        })
    }
}

fn simulate(mdp: &Mdp, policy: &Policy, horizon: usize, rng: &mut SimRng) -> Trajectory {
    let mut s = mdp.initial.draw(rng);
    let mut log_prob = mdp.initial.log_prob(&s);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let a = policy.draw(&s, rng);
        log_prob += policy.log_prob(&s, &a);
        rewards.push(mdp.reward.eval(&s, &a));
        let next = mdp.dynamics.draw(&s, &a, rng);
        log_prob += mdp.dynamics.log_prob(&s, &a, &next);
        states.push(s);
        actions.push(a);
        s = next;
    }
    states.push(s);
    Trajectory {
        states,
        actions,
        rewards,
        log_prob,
    }
}

/// Simulates `n_traj` independent trajectories; trajectory `i` uses stream
/// `("rollout", i)` of `seed`.
pub fn rollout(
    mdp: &Mdp,
    policy: &Policy,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    policy.check_compatible(mdp)?;
    if horizon == 0 {
        return Err(Error::config("horizon must be at least 1"));
    }
    if n_traj == 0 {
        return Err(Error::config("n_traj must be at least 1"));
    }
    Ok(par::map_indexed(n_traj, |i| {
        simulate(
            mdp,
            policy,
            horizon,
            &mut rng::stream(seed, "rollout", i as u64),
        )
    }))
}

/// `log eta(s_0) + sum log pi(a_t|s_t) + sum log P(s_{t+1}|s_t, a_t)`.
pub fn trajectory_log_prob(mdp: &Mdp, policy: &Policy, traj: &Trajectory) -> f64 {
    let init = mdp.initial.log_prob(&traj.states[0]);
    let pi: f64 = traj
        .transitions()
        .map(|(s, a, _)| policy.log_prob(s, a))
        .sum();
    let dyn_: f64 = traj
        .transitions()
        .map(|(s, a, n)| mdp.dynamics.log_prob(s, a, n))
        .sum();
    init + pi + dyn_
}

fn tabular_parts<'a>(
    mdp: &'a Mdp,
    policy: &'a Policy,
) -> Result<(&'a TabularDynamics, &'a [Vec<f64>], &'a [Vec<f64>])> {
    policy.check_compatible(mdp)?;
    match (&mdp.dynamics, &mdp.reward, policy) {
        (Dynamics::Tabular(t), Reward::Table(r), Policy::TabularStochastic { probs, .. }) => {
            Ok((t, r, probs))
        }
        _ => Err(Error::Unsupported(
            "exact evaluation needs a tabular mdp; use monte_carlo_value instead".into(),
        )),
    }
}

/// Exact value of `policy` over the mdp's horizon by backward induction.
pub fn ground_truth_value(mdp: &Mdp, policy: &Policy) -> Result<f64> {
    let (t, r, pi) = tabular_parts(mdp, policy)?;
    let n = t.n_states;
    let mut v = vec![0.0; n];
    for _ in 0..mdp.horizon {
        v = (0..n)
            .map(|s| {
                (0..t.n_actions)
                    .map(|a| {
                        let cont: f64 = (0..n).map(|sn| t.prob(s, a, sn) * v[sn]).sum();
                        pi[s][a] * (r[s][a] + cont)
                    })
                    .sum()
            })
            .collect();
    }
    let eta = match &mdp.initial {
        Initial::Categorical(p, _) => p,
        Initial::Gaussian(..) => unreachable!("tabular mdp"),
    };
    Ok(eta.iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// Plain Monte Carlo value over the mdp's horizon, for any mdp kind.
pub fn monte_carlo_value(
    mdp: &Mdp,
    policy: &Policy,
    n_traj: usize,
    seed: u64,
) -> Result<ValueEstimate> {
    let returns: Vec<f64> = rollout(mdp, policy, n_traj, mdp.horizon, seed)?
        .iter()
        .map(Trajectory::total_return)
        .collect();
    Ok(ValueEstimate {
        value: stats::mean(&returns),
        stderr: stats::std_error(&returns),
    })
}

/// Every trajectory of a small tabular mdp with its probability.
pub fn enumerate_trajectories(mdp: &Mdp, policy: &Policy) -> Result<Vec<(Trajectory, f64)>> {
    const LIMIT: f64 = 2e6;
    let (t, _, _) = tabular_parts(mdp, policy)?;
    let count = (t.n_states as f64) * ((t.n_states * t.n_actions) as f64).powi(mdp.horizon as i32);
    if count > LIMIT {
        return Err(Error::config(format!(
            "refusing to enumerate {count:e} trajectories"
        )));
    }
    let mut out = Vec::new();
    let mut stack: Vec<(Trajectory, f64)> = (0..t.n_states)
        .map(|s| {
            let st = vec![s as f64];
            let lp = mdp.initial.log_prob(&st);
            (
                Trajectory {
                    states: vec![st],
                    actions: vec![],
                    rewards: vec![],
                    log_prob: lp,
                },
                lp.exp(),
            )
        })
        .filter(|(_, p)| *p > 0.0)
        .collect();
    while let Some((traj, p)) = stack.pop() {
        if traj.horizon() == mdp.horizon {
            out.push((traj, p));
            continue;
        }
        let s = traj.states.last().expect("non-empty").clone();
        for a in 0..t.n_actions {
            let act = vec![a as f64];
            let pa = policy.log_prob(&s, &act).exp();
            if pa == 0.0 {
                continue;
            }
            for sn in 0..t.n_states {
                let ps = t.prob(index(&s), a, sn);
                if ps == 0.0 {
                    continue;
                }
                let mut next = traj.clone();
                next.actions.push(act.clone());
                next.rewards.push(mdp.reward.eval(&s, &act));
                next.states.push(vec![sn as f64]);
                next.log_prob += pa.ln() + ps.ln();
                stack.push((next, p * pa * ps));
            }
        }
    }
    Ok(out)
}

/// Laplace-smoothed counts: `(n(s,a,s') + lambda) / (n(s,a) + lambda |S|)`.
pub fn fit_tabular(
    data: &[Trajectory],
    n_states: usize,
    n_actions: usize,
    lambda: f64,
) -> Result<TabularDynamics> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config(format!("lambda must be >= 0, got {lambda}")));
    }
    let mut counts = vec![vec![vec![0.0; n_states]; n_states]; n_actions];
    let mut seen = 0usize;
    for traj in data {
        for (s, a, n) in traj.transitions() {
            let (s, a, n) = (index(s), index(a), index(n));
            if s >= n_states || n >= n_states || a >= n_actions {
                return Err(Error::config(format!(
                    "transition ({s}, {a}, {n}) is outside the {n_states}x{n_actions} space"
                )));
            }
            counts[a][s][n] += 1.0;
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(Error::Empty("transitions".into()));
    }
    let probs = counts
        .into_iter()
        .map(|m| {
            m.into_iter()
                .map(|row| {
                    let total: f64 = row.iter().sum::<f64>() + lambda * n_states as f64;
                    if total == 0.0 {
                        vec![1.0 / n_states as f64; n_states]
                    } else {
                        row.iter().map(|c| (c + lambda) / total).collect()
                    }
                })
                .collect()
        })
        .collect();
    TabularDynamics::new(probs)
}

/// Average of tabular fits on bootstrap resamples of the trajectories.
pub fn fit_bagged_tabular(
    data: &[Trajectory],
    n_states: usize,
    n_actions: usize,
    lambda: f64,
    n_bags: usize,
    seed: u64,
) -> Result<TabularDynamics> {
    if n_bags == 0 {
        return Err(Error::config("n_bags must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::Empty("trajectories".into()));
    }
    let fits = par::try_map_indexed(n_bags, |k| {
        let mut rng = rng::stream(seed, "bag", k as u64);
        let bag: Vec<Trajectory> = (0..data.len())
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();
        fit_tabular(&bag, n_states, n_actions, lambda)
    })?;
    let mut probs = vec![vec![vec![0.0; n_states]; n_states]; n_actions];
    for f in &fits {
        for (a, m) in f.probs.iter().enumerate() {
            for (s, row) in m.iter().enumerate() {
                for (n, p) in row.iter().enumerate() {
                    probs[a][s][n] += p / n_bags as f64;
                }
            }
        }
    }
    // Renormalize away the rounding of the running average.
    for row in probs.iter_mut().flatten() {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
    }
    TabularDynamics::new(probs)
}

/// Least squares for `[A B]`, residual covariance plus `ridge * I` for sigma.
pub fn fit_linear_gaussian(data: &[Trajectory], ridge: f64) -> Result<LinearDynamics> {
    let rows: Vec<(&[f64], &[f64], &[f64])> = data.iter().flat_map(|t| t.transitions()).collect();
    if rows.is_empty() {
        return Err(Error::Empty("transitions".into()));
    }
    let d = rows[0].0.len();
    let m = rows[0].1.len();
    let n = rows.len();
    let x = DMatrix::from_fn(n, d + m, |i, j| {
        if j < d {
            rows[i].0[j]
        } else {
            rows[i].1[j - d]
        }
    });
    let y = DMatrix::from_fn(n, d, |i, j| rows[i].2[j]);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &y;
    let chol = match xtx.clone().cholesky() {
        Some(c) => c,
        None => (xtx + DMatrix::identity(d + m, d + m) * ridge)
            .cholesky()
            .ok_or_else(|| {
                Error::RankDeficient(format!("{n} transitions in {} unknowns", d + m))
            })?,
    };
    let theta = chol.solve(&xty);
    let resid = &y - &x * &theta;
    let sigma = resid.transpose() * &resid / n as f64 + DMatrix::identity(d, d) * ridge;
    let coef = theta.transpose();
    LinearDynamics::new(
        coef.columns(0, d).into_owned(),
        coef.columns(d, m).into_owned(),
        // Symmetrize the rounding of the product.
        (&sigma + sigma.transpose()) * 0.5,
    )
}

/// Refits dynamics of the same kind and size as `like`.
pub fn fit_dynamics(data: &[Trajectory], like: &Dynamics) -> Result<Dynamics> {
    match like {
        Dynamics::Tabular(t) => Ok(Dynamics::Tabular(fit_tabular(
            data,
            t.n_states,
            t.n_actions,
            1.0,
        )?)),
        Dynamics::LinearGaussian(_) => {
            Ok(Dynamics::LinearGaussian(fit_linear_gaussian(data, 1e-6)?))
        }
    }
}

/// Feature map applied to `(s, a, s')` before classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransitionEncoding {
    /// One indicator per `(s, a, s')` cell.
    JointOneHot { n_states: usize, n_actions: usize },
    /// `z = (s, a, s')` followed by all products `z_i z_j`, `i <= j`.
    Quadratic { state_dim: usize, action_dim: usize },
}

impl TransitionEncoding {
    pub fn for_dynamics(d: &Dynamics) -> Self {
        match d {
            Dynamics::Tabular(t) => TransitionEncoding::JointOneHot {
                n_states: t.n_states,
                n_actions: t.n_actions,
            },
            Dynamics::LinearGaussian(l) => TransitionEncoding::Quadratic {
                state_dim: l.state_dim(),
                action_dim: l.action_dim(),
            },
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            TransitionEncoding::JointOneHot {
                n_states,
                n_actions,
            } => n_states * n_actions * n_states,
            TransitionEncoding::Quadratic {
                state_dim,
                action_dim,
            } => {
                let z = 2 * state_dim + action_dim;
                z + z * (z + 1) / 2
            }
        }
    }

    pub fn encode(&self, s: &[f64], a: &[f64], next: &[f64]) -> Vec<f64> {
        match *self {
            TransitionEncoding::JointOneHot {
                n_states,
                n_actions,
            } => {
                let mut v = vec![0.0; self.dim()];
                v[(index(s) * n_actions + index(a)) * n_states + index(next)] = 1.0;
                v
            }
            TransitionEncoding::Quadratic { .. } => {
                let z: Vec<f64> = s.iter().chain(a).chain(next).copied().collect();
                let mut v = z.clone();
                for i in 0..z.len() {
                    for j in i..z.len() {
                        v.push(z[i] * z[j]);
                    }
                }
                v
            }
        }
    }
}

/// Anything that assigns a log importance weight to a transition.
pub trait TransitionWeigher: Sync {
    fn log_weight(&self, s: &[f64], a: &[f64], next: &[f64]) -> Result<f64>;
}

/// Weight 1 everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitWeigher;

impl TransitionWeigher for UnitWeigher {
    fn log_weight(&self, _: &[f64], _: &[f64], _: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Exact per-transition ratio `P(s'|s,a) / P_theta(s'|s,a)`.
#[derive(Debug, Clone)]
pub struct OracleWeigher {
    pub truth: Dynamics,
    pub model: Dynamics,
}

impl TransitionWeigher for OracleWeigher {
    fn log_weight(&self, s: &[f64], a: &[f64], next: &[f64]) -> Result<f64> {
        let lp = self.truth.log_prob(s, a, next);
        let lq = self.model.log_prob(s, a, next);
        if lq == f64::NEG_INFINITY {
            if lp == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            return Err(Error::SupportViolation { index: 0 });
        }
        Ok(lp - lq)
    }
}

/// Classifier separating real transitions from model transitions.
#[derive(Debug, Clone)]
pub struct TransitionClassifier {
    pub classifier: ProbClassifier,
    pub encoding: TransitionEncoding,
    pub gamma: f64,
}

impl TransitionClassifier {
    pub fn probability(&self, s: &[f64], a: &[f64], next: &[f64]) -> Result<f64> {
        self.classifier
            .predict_proba_slice(&self.encoding.encode(s, a, next))
    }
}

impl TransitionWeigher for TransitionClassifier {
    fn log_weight(&self, s: &[f64], a: &[f64], next: &[f64]) -> Result<f64> {
        let c = self.probability(s, a, next)?;
        Ok(self.gamma.ln() + c.ln() - (1.0 - c).ln())
    }
}

/// Logistic classifier settings for transition features.
pub fn transition_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        architecture: Architecture::Logistic,
        optimizer: Optimizer::Adam,
        learning_rate: 0.05,
        epochs: 100,
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    }
}

/// Pairs every real transition with one whose successor is redrawn from
/// `model`, so `gamma = 1`.
pub fn train_transition_classifier(
    real: &[Trajectory],
    model: &Dynamics,
    train: &TrainConfig,
) -> Result<TransitionClassifier> {
    let encoding = TransitionEncoding::for_dynamics(model);
    let per_traj = par::map_indexed(real.len(), |i| {
        let mut rng = rng::stream(train.seed, "negatives", i as u64);
        real[i]
            .transitions()
            .map(|(s, a, n)| {
                let fake = model.draw(s, a, &mut rng);
                (encoding.encode(s, a, n), encoding.encode(s, a, &fake))
            })
            .collect::<Vec<_>>()
    });
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (p, q) in per_traj.into_iter().flatten() {
        positives.push(SamplePoint::new(p)?);
        negatives.push(SamplePoint::new(q)?);
    }
    if positives.is_empty() {
        return Err(Error::Empty("transitions".into()));
    }
    let dataset = LabeledRatioDataset::new(positives, negatives)?;
    let gamma = dataset.gamma();
    Ok(TransitionClassifier {
        classifier: train_classifier(&dataset, train)?,
        encoding,
        gamma,
    })
}

/// Per-transition log weights, one row per trajectory.
pub fn step_log_weights<W: TransitionWeigher + ?Sized>(
    trajs: &[Trajectory],
    weigher: &W,
) -> Result<Vec<Vec<f64>>> {
    par::try_map_indexed(trajs.len(), |i| {
        trajs[i]
            .transitions()
            .map(|(s, a, n)| weigher.log_weight(s, a, n))
            .collect()
    })
}

/// Product of the first `h` transition weights; later steps count as 1.
pub fn trajectory_weight<W: TransitionWeigher + ?Sized>(
    traj: &Trajectory,
    weigher: &W,
    h: usize,
) -> Result<f64> {
    if h > traj.horizon() {
        return Err(Error::config(format!(
            "H = {h} exceeds the horizon {}",
            traj.horizon()
        )));
    }
    let mut lw = 0.0;
    for (s, a, n) in traj.transitions().take(h) {
        lw += weigher.log_weight(s, a, n)?;
    }
    Ok(lw.exp())
}

fn exp_shifted(logw: &[f64], shift: bool) -> Result<Vec<f64>> {
    let m = if shift {
        logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    } else {
        0.0
    };
    if m == f64::NEG_INFINITY {
        return Err(Error::ZeroWeights);
    }
    let w: Vec<f64> = logw.iter().map(|l| (l - m).exp()).collect();
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("trajectory weight".into()));
    }
    Ok(w)
}

/// Weighted mean of returns with trajectory weights over the first `h` steps.
pub fn weighted_value(
    trajs: &[Trajectory],
    log_weights: &[Vec<f64>],
    h: usize,
    self_normalize: bool,
) -> Result<ValueEstimate> {
    if trajs.is_empty() {
        return Err(Error::Empty("trajectories".into()));
    }
    if log_weights.len() != trajs.len() {
        return Err(Error::DimensionMismatch {
            expected: trajs.len(),
            found: log_weights.len(),
        });
    }
    if let Some(t) = trajs.iter().find(|t| h > t.horizon()) {
        return Err(Error::config(format!(
            "H = {h} exceeds the horizon {}",
            t.horizon()
        )));
    }
    let logw: Vec<f64> = log_weights.iter().map(|l| l[..h].iter().sum()).collect();
    // Self-normalization is scale free, so shift before exponentiating.
    let w = exp_shifted(&logw, self_normalize)?;
    let returns: Vec<f64> = trajs.iter().map(Trajectory::total_return).collect();
    let config = WeightConfig {
        self_normalize,
        ..WeightConfig::default()
    };
    let r = estimate_from_values(&w, &returns, &config)?;
    Ok(ValueEstimate {
        value: r.value,
        stderr: r.stderr,
    })
}

/// What weight multiplies the reward at step `t` in the stepwise estimator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletWeight {
    /// Product of the transition weights up to and including step `t`,
    /// an estimate of the joint ratio of the triple at time `t`.
    #[default]
    Cumulative,
    /// The weight of transition `t` alone.
    Local,
}

/// `mean_i sum_t w_it r_it`, where with self-normalization each column
/// `w_.t` is divided by its batch mean.
pub fn stepwise_value(
    trajs: &[Trajectory],
    log_weights: &[Vec<f64>],
    self_normalize: bool,
    mode: TripletWeight,
) -> Result<ValueEstimate> {
    if trajs.is_empty() {
        return Err(Error::Empty("trajectories".into()));
    }
    let horizon = trajs[0].horizon();
    if trajs.iter().any(|t| t.horizon() != horizon) || log_weights.len() != trajs.len() {
        return Err(Error::config(
            "stepwise estimation needs equal-length trajectories and one weight row each",
        ));
    }
    let n = trajs.len();
    let mut cum = vec![0.0; n];
    let mut summands = vec![0.0; n];
    for t in 0..horizon {
        let col: Vec<f64> = (0..n)
            .map(|i| match mode {
                TripletWeight::Cumulative => {
                    cum[i] += log_weights[i][t];
                    cum[i]
                }
                TripletWeight::Local => log_weights[i][t],
            })
            .collect();
        let mut w = exp_shifted(&col, self_normalize)?;
        if self_normalize {
            let mean = stats::mean(&w);
            w.iter_mut().for_each(|x| *x /= mean);
        }
        for i in 0..n {
            summands[i] += w[i] * trajs[i].rewards[t];
        }
    }
    Ok(ValueEstimate {
        value: stats::mean(&summands),
        stderr: stats::std_error(&summands),
    })
}

/// Rolls out `n_traj` model trajectories and weights them over the first `h` steps.
#[allow(clippy::too_many_arguments)]
pub fn lfiw_value<W: TransitionWeigher + ?Sized>(
    model: &Mdp,
    policy: &Policy,
    weigher: &W,
    n_traj: usize,
    horizon: usize,
    h: usize,
    seed: u64,
    self_normalize: bool,
) -> Result<ValueEstimate> {
    let trajs = rollout(model, policy, n_traj, horizon, seed)?;
    let lw = step_log_weights(&trajs, weigher)?;
    weighted_value(&trajs, &lw, h, self_normalize)
}

pub fn stepwise_lfiw_value<W: TransitionWeigher + ?Sized>(
    model: &Mdp,
    policy: &Policy,
    weigher: &W,
    n_traj: usize,
    horizon: usize,
    seed: u64,
    self_normalize: bool,
) -> Result<ValueEstimate> {
    let trajs = rollout(model, policy, n_traj, horizon, seed)?;
    let lw = step_log_weights(&trajs, weigher)?;
    stepwise_value(&trajs, &lw, self_normalize, TripletWeight::default())
}

/// `sum_tau p~(tau) W_h(tau) R(tau)` by enumerating every model trajectory.
pub fn exact_lfiw_value<W: TransitionWeigher + ?Sized>(
    model: &Mdp,
    policy: &Policy,
    weigher: &W,
    h: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (traj, p) in enumerate_trajectories(model, policy)? {
        total += p * trajectory_weight(&traj, weigher, h)? * traj.total_return();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub h: usize,
    pub value: f64,
    pub stderr: f64,
    /// `v - v_hat_H` when the true value is known.
    pub delta: Option<f64>,
}

/// One estimate per `H`, all on the same rollouts.
pub fn sweep_from_weights(
    trajs: &[Trajectory],
    log_weights: &[Vec<f64>],
    h_values: &[usize],
    self_normalize: bool,
    truth: Option<f64>,
) -> Result<Vec<SweepPoint>> {
    h_values
        .iter()
        .map(|&h| {
            let e = weighted_value(trajs, log_weights, h, self_normalize)?;
            Ok(SweepPoint {
                h,
                value: e.value,
                stderr: e.stderr,
                delta: truth.map(|v| v - e.value),
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn horizon_sweep<W: TransitionWeigher + ?Sized>(
    model: &Mdp,
    policy: &Policy,
    weigher: &W,
    n_traj: usize,
    horizon: usize,
    seed: u64,
    self_normalize: bool,
    h_values: &[usize],
    truth: Option<f64>,
) -> Result<Vec<SweepPoint>> {
    if let Some(h) = h_values.iter().find(|&&h| h > horizon) {
        return Err(Error::config(format!(
            "H = {h} exceeds the horizon {horizon}"
        )));
    }
    let trajs = rollout(model, policy, n_traj, horizon, seed)?;
    let lw = step_log_weights(&trajs, weigher)?;
    sweep_from_weights(&trajs, &lw, h_values, self_normalize, truth)
}

pub fn sweep_to_csv(curve: &[SweepPoint]) -> String {
    let mut out = String::from("H,value,stderr,delta\n");
    for p in curve {
        let delta = p.delta.map(|d| d.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", p.h, p.value, p.stderr, delta));
    }
    out
}

const CHAIN_ENV: &str = include_str!("../data/chain4/env.json");
const CHAIN_BEHAVIOR: &str = include_str!("../data/chain4/behavior.json");
const CHAIN_EVAL: &str = include_str!("../data/chain4/eval.json");

/// The bundled four-state chain: environment, behavior policy, evaluation policy.
pub fn chain4() -> (Mdp, Policy, Policy) {
    (
        Mdp::from_json(CHAIN_ENV).expect("bundled environment parses"),
        Policy::from_json(CHAIN_BEHAVIOR).expect("bundled behavior policy parses"),
        Policy::from_json(CHAIN_EVAL).expect("bundled evaluation policy parses"),
    )
}

/// JSON sources of [`chain4`], in the same order.
pub fn chain4_json() -> [&'static str; 3] {
    [CHAIN_ENV, CHAIN_BEHAVIOR, CHAIN_EVAL]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OpeConfig {
    /// Behavior trajectories for fitting, and model rollouts for evaluation.
    pub n_traj: usize,
    /// Overrides the environment's horizon.
    pub horizon: Option<usize>,
    pub h_values: Vec<usize>,
    pub seed: u64,
    pub n_classifiers: usize,
    /// Mixed into the learned dynamics; see [`Dynamics::corrupted`].
    pub corruption: f64,
    pub self_normalize: bool,
    /// Bootstrap bags for the tabular model; 0 fits a single model.
    pub n_bags: usize,
    /// Trajectories for the reference value when no exact solution exists.
    pub n_truth: usize,
    pub train: TrainConfig,
}

impl Default for OpeConfig {
    fn default() -> Self {
        Self {
            n_traj: 100,
            horizon: None,
            h_values: Vec::new(),
            seed: 0,
            n_classifiers: 1,
            corruption: 0.3,
            self_normalize: true,
            n_bags: 0,
            n_truth: 10_000,
            train: transition_train_config(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeResult {
    pub truth: f64,
    /// Unweighted model estimate, equal to the `H = 0` point.
    pub model_value: ValueEstimate,
    pub lfiw_value: ValueEstimate,
    pub stepwise_value: ValueEstimate,
    pub curve: Vec<SweepPoint>,
    pub horizon: usize,
}

fn average(estimates: &[ValueEstimate]) -> ValueEstimate {
    let k = estimates.len() as f64;
    ValueEstimate {
        value: estimates.iter().map(|e| e.value).sum::<f64>() / k,
        stderr: estimates.iter().map(|e| e.stderr).sum::<f64>() / k,
    }
}

/// Fits dynamics on behavior data, corrupts them, then evaluates `eval`
/// on model rollouts with and without transition weights.
///
/// Classifier `k` trains on its own behavior batch (batch 0 also fits the
/// dynamics); estimates are averaged over classifiers.
pub fn run_ope_experiment(
    env: &Mdp,
    behavior: &Policy,
    eval: &Policy,
    config: &OpeConfig,
) -> Result<OpeResult> {
    if config.n_classifiers == 0 {
        return Err(Error::config("n_classifiers must be at least 1"));
    }
    let env = match config.horizon {
        Some(h) => env.with_horizon(h)?,
        None => env.clone(),
    };
    let horizon = env.horizon;
    let h_values = if config.h_values.is_empty() {
        vec![0, horizon]
    } else {
        config.h_values.clone()
    };
    let seed = config.seed;
    let behavior_batch = |k: u64| {
        rollout(
            &env,
            behavior,
            config.n_traj,
            horizon,
            rng::derive_seed(seed, "behavior", k),
        )
    };
    let data = behavior_batch(0)?;
    let fitted = match (env.dynamics(), config.n_bags) {
        (Dynamics::Tabular(t), b) if b > 0 => Dynamics::Tabular(fit_bagged_tabular(
            &data,
            t.n_states,
            t.n_actions,
            1.0,
            b,
            rng::derive_seed(seed, "bag", 0),
        )?),
        (d, _) => fit_dynamics(&data, d)?,
    };
    let learned = fitted.corrupted(config.corruption)?;
    let model = env.with_dynamics(learned.clone())?;

    let truth = match env.dynamics() {
        Dynamics::Tabular(_) => ground_truth_value(&env, eval)?,
        Dynamics::LinearGaussian(_) => {
            monte_carlo_value(
                &env,
                eval,
                config.n_truth,
                rng::derive_seed(seed, "truth", 0),
            )?
            .value
        }
    };

    let trajs = rollout(
        &model,
        eval,
        config.n_traj,
        horizon,
        rng::derive_seed(seed, "rollout", 0),
    )?;
    let unit = vec![vec![0.0; horizon]; trajs.len()];
    let model_value = weighted_value(&trajs, &unit, 0, config.self_normalize)?;

    let mut curves = Vec::new();
    let mut full = Vec::new();
    let mut stepwise = Vec::new();
    for k in 0..config.n_classifiers as u64 {
        let batch = if k == 0 {
            data.clone()
        } else {
            behavior_batch(k)?
        };
        let train = TrainConfig {
            seed: rng::derive_seed(seed, "classifier", k),
            ..config.train.clone()
        };
        let clf = train_transition_classifier(&batch, &learned, &train)?;
        let lw = step_log_weights(&trajs, &clf)?;
        curves.push(sweep_from_weights(
            &trajs,
            &lw,
            &h_values,
            config.self_normalize,
            None,
        )?);
        full.push(weighted_value(&trajs, &lw, horizon, config.self_normalize)?);
        stepwise.push(stepwise_value(
            &trajs,
            &lw,
            config.self_normalize,
            TripletWeight::default(),
        )?);
    }
    let curve = (0..h_values.len())
        .map(|j| {
            let e = average(
                &curves
                    .iter()
                    .map(|c| ValueEstimate {
                        value: c[j].value,
                        stderr: c[j].stderr,
                    })
                    .collect::<Vec<_>>(),
            );
            SweepPoint {
                h: h_values[j],
                value: e.value,
                stderr: e.stderr,
                delta: Some(truth - e.value),
            }
        })
        .collect();
    Ok(OpeResult {
        truth,
        model_value,
        lfiw_value: average(&full),
        stepwise_value: average(&stepwise),
        curve,
        horizon,
    })
}
