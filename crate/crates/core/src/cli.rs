//! Command line driver: configuration, seeding, file I/O and run manifests.
//!
//! Every run writes its artifacts into one output directory together with a
//! `manifest.json` listing their SHA-256 digests; `verify` recomputes them.

use crate::error::{Error, ErrorClass};
use crate::estimators::{
    bias_variance_decompose, bootstrap_estimate, estimate_from_values, standard_config_grid,
    transform_weights, BootstrapConfig, Statistic, WeightConfig,
};
use crate::mbope::{self, Mdp, OpeConfig, Policy};
use crate::metrics::{debiased_metric_suite, FeatureSet, LabelDistribution};
use crate::par;
use crate::ratio::{
    calibration_report, importance_weights, train_classifier_with_history, Architecture,
    LabeledRatioDataset, Optimizer, ProbClassifier, SamplePoint, TrainConfig,
};
use crate::resample::{
    empirical_distribution, random_triple, DiscreteDistributionPair, ResampledModel,
};
use crate::rng;
use crate::sampling::CategoricalSampler;
use crate::stats;
use crate::synthetic::{
    run_augmentation_experiment, run_fig1_experiment, AugmentConfig, AugmentWeights, Fig1Config,
    MomentToy, MomentToyConfig,
};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "LFIW_OUT";
const DEFAULT_OUT: &str = "lfiw-out";
pub const MANIFEST: &str = "manifest.json";

/// Failure of a CLI run, tagged with the class that picks the exit code.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub code: i32,
}

impl CliError {
    fn new(kind: &'static str, code: i32, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            code,
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new("validation", 2, message)
    }

    fn io(message: impl Into<String>) -> Self {
        Self::new("io", 3, message)
    }

    /// Single-line JSON for standard error.
    pub fn to_json_line(&self) -> String {
        json!({"error": self.kind, "code": self.code, "message": self.message}).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e.class() {
            ErrorClass::Validation => Self::validation(e.to_string()),
            ErrorClass::Io => Self::io(e.to_string()),
            ErrorClass::Numeric => Self::new("numeric", 4, e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parameter block usable both as command line flags and as a config-file
/// section; flags win field by field.
macro_rules! params {
    ($(#[$m:meta])* $name:ident { $($(#[$fm:meta])* $field:ident : $ty:ty),* $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
        #[serde(default, deny_unknown_fields)]
        pub struct $name {
            $($(#[$fm])* pub $field: Option<$ty>,)*
        }

        impl $name {
            fn merged(self, file: Self) -> Self {
                Self { $($field: self.$field.or(file.$field),)* }
            }
        }
    };
}

params!(TrainRatioParams {
    /// CSV of samples from the target (label 1).
    #[arg(long)]
    positives: PathBuf,
    /// CSV of samples from the model (label 0).
    #[arg(long)]
    negatives: PathBuf,
    /// logistic or mlp.
    #[arg(long)]
    architecture: String,
    /// sgd or adam.
    #[arg(long)]
    optimizer: String,
    #[arg(long)]
    learning_rate: f64,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    batch_size: usize,
    #[arg(long)]
    hidden_units: usize,
    #[arg(long)]
    l2_penalty: f64,
    #[arg(long)]
    momentum: f64,
    #[arg(long)]
    calibration_bins: usize,
});

params!(EstimateParams {
    /// Classifier JSON written by train-ratio.
    #[arg(long)]
    classifier: PathBuf,
    /// CSV of model samples.
    #[arg(long)]
    samples: PathBuf,
    /// One-column CSV of f(x) per sample; defaults to the first feature.
    #[arg(long)]
    values: PathBuf,
    #[arg(long)]
    gamma: f64,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    self_normalize: bool,
    /// Percentile bootstrap of the estimate over samples; 0 skips it.
    #[arg(long)]
    bootstrap_n: usize,
    #[arg(long)]
    confidence: f64,
});

params!(ResampleParams {
    /// JSON `{"p": [...], "p_theta": [...], "weights": [...]}`; weights default to p/p_theta.
    #[arg(long)] pair: PathBuf,
    /// Alphabet size for a random pair when no file is given.
    #[arg(long)] symbols: usize,
    /// Comma-separated particle counts.
    #[arg(long, value_delimiter = ',')] particles: Vec<usize>,
    #[arg(long)] draws: usize,
});

params!(MetricsParams {
    /// CSV of model-sample features.
    #[arg(long)]
    model: PathBuf,
    /// CSV of real-sample features.
    #[arg(long)]
    real: PathBuf,
    /// One-column CSV of raw importance weights for the model samples.
    #[arg(long)]
    weights: PathBuf,
    /// CSV of class probabilities for the model samples.
    #[arg(long)]
    model_probs: PathBuf,
    #[arg(long)]
    bandwidth: f64,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    beta: f64,
    #[arg(long)]
    self_normalize: bool,
});

params!(Fig1Params {
    /// Samples per class.
    #[arg(long)]
    n: usize,
    /// Bootstrap resamples; 0 disables the band.
    #[arg(long)]
    resamples: usize,
    #[arg(long)]
    epochs: usize,
    #[arg(long)]
    learning_rate: f64,
    #[arg(long)]
    warm_start_epochs: usize,
});

params!(AugmentParams {
    #[arg(long)]
    m: f64,
    /// unit, lfiw or oracle.
    #[arg(long)]
    weights: String,
    #[arg(long)]
    n_real: usize,
    #[arg(long)]
    n_generated: usize,
    #[arg(long)]
    n_test: usize,
    #[arg(long)]
    outlier_rate: f64,
    #[arg(long)]
    iterations: usize,
});

params!(OpeParams {
    /// MDP JSON; defaults to the bundled four-state chain.
    #[arg(long)] env: PathBuf,
    /// Behavior policy JSON.
    #[arg(long)] behavior: PathBuf,
    /// Evaluation policy JSON.
    #[arg(long)] eval: PathBuf,
    #[arg(long)] n_traj: usize,
    #[arg(long)] horizon: usize,
    /// Comma-separated prefix lengths H.
    #[arg(long = "H-sweep", value_delimiter = ',')] h_sweep: Vec<usize>,
    #[arg(long)] n_classifiers: usize,
    #[arg(long)] corruption: f64,
    #[arg(long)] self_normalize: bool,
    #[arg(long)] n_bags: usize,
    #[arg(long)] epochs: usize,
});

params!(BiasVarianceParams {
    #[arg(long)]
    trials: usize,
    #[arg(long)]
    n_fit: usize,
    #[arg(long)]
    n_train: usize,
    #[arg(long)]
    batch_size: usize,
});

/// Settings shared by every experiment subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = OUT_ENV)]
    pub out: Option<PathBuf>,
    /// Root seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct Run<P: Args> {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub params: P,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a probabilistic classifier between two sample sets.
    TrainRatio(Run<TrainRatioParams>),
    /// Importance-weighted estimate of E_p[f] from model samples.
    Estimate(Run<EstimateParams>),
    /// KL diagnostics and SIR on a discrete pair.
    Resample(Run<ResampleParams>),
    /// IS, FID and KID with and without weights.
    Metrics(Run<MetricsParams>),
    /// Classifier curve against the optimal one on the mixture toy.
    Fig1(Run<Fig1Params>),
    /// Weighted data augmentation on the contaminated toy.
    Augment(Run<AugmentParams>),
    /// Model-based off-policy evaluation with an H sweep.
    Ope(Run<OpeParams>),
    /// Bias-variance table over the standard weighting configurations.
    BiasVariance(Run<BiasVarianceParams>),
    /// Recompute the digests listed in a manifest.
    Verify {
        /// Path to manifest.json.
        manifest: PathBuf,
    },
}

#[derive(Debug, Parser)]
#[command(
    name = "lfiw",
    version,
    about = "Likelihood-free importance weighting experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub train_ratio: TrainRatioParams,
    pub estimate: EstimateParams,
    pub resample: ResampleParams,
    pub metrics: MetricsParams,
    pub fig1: Fig1Params,
    pub augment: AugmentParams,
    pub ope: OpeParams,
    pub bias_variance: BiasVarianceParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    /// Full configuration after defaults were filled in.
    pub resolved: Value,
    pub seed: u64,
    pub library_version: String,
    pub parallel: bool,
    pub seed_streams: Vec<String>,
    pub wall_clock_seconds: f64,
    pub inputs: Vec<OutputDigest>,
    pub outputs: Vec<OutputDigest>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// Numeric CSV without a header; a first row that does not parse is taken as one.
pub fn read_matrix(path: &Path) -> CliResult<Vec<Vec<f64>>> {
    let text = read_text(path)?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        return read_jsonl(path, &text);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(CliError::validation(format!(
                    "{} row {}: {e}",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::validation(format!(
            "{} has no rows",
            path.display()
        )));
    }
    Ok(rows)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRow {
    features: Vec<f64>,
}

/// One `{"features": [...]}` object per line; blank lines are skipped.
fn read_jsonl(path: &Path, text: &str) -> CliResult<Vec<Vec<f64>>> {
    let rows = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<JsonlRow>(l)
                .map(|r| r.features)
                .map_err(|e| {
                    CliError::validation(format!("{} line {}: {e}", path.display(), i + 1))
                })
        })
        .collect::<CliResult<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(CliError::validation(format!(
            "{} has no rows",
            path.display()
        )));
    }
    Ok(rows)
}

fn read_column(path: &Path) -> CliResult<Vec<f64>> {
    let rows = read_matrix(path)?;
    if rows.iter().any(|r| r.len() != 1) {
        return Err(CliError::validation(format!(
            "{} must have exactly one column",
            path.display()
        )));
    }
    Ok(rows.into_iter().map(|r| r[0]).collect())
}

/// A single column, or the `raw_weight` column of a `weights.csv` written by `estimate`.
fn read_weights(path: &Path) -> CliResult<Vec<f64>> {
    let text = read_text(path)?;
    let header = text.lines().next().unwrap_or_default();
    let Some(col) = header.split(',').position(|h| h.trim() == "raw_weight") else {
        return read_column(path);
    };
    read_matrix(path)?
        .into_iter()
        .map(|r| {
            r.get(col)
                .copied()
                .ok_or_else(|| CliError::validation(format!("{}: short row", path.display())))
        })
        .collect()
}

fn points(rows: Vec<Vec<f64>>) -> CliResult<Vec<SamplePoint>> {
    rows.into_iter()
        .map(|r| SamplePoint::new(r).map_err(CliError::from))
        .collect()
}

fn parse_enum<T: DeserializeOwned>(what: &str, s: &str) -> CliResult<T> {
    serde_json::from_value(Value::String(s.to_lowercase()))
        .map_err(|_| CliError::validation(format!("unknown {what} '{s}'")))
}

fn require<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::validation(format!("missing required --{flag}")))
}

fn f64_row(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn pretty(v: &impl Serialize) -> CliResult<String> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| CliError::validation(e.to_string()))
}

/// Artifacts of one run, written atomically into the output directory.
struct Outputs {
    dir: PathBuf,
    written: Vec<OutputDigest>,
    inputs: Vec<OutputDigest>,
}

impl Outputs {
    fn new(dir: PathBuf) -> CliResult<Self> {
        fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            written: Vec::new(),
            inputs: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        write_atomic(&self.dir.join(name), contents.as_bytes())?;
        self.written.push(OutputDigest {
            path: name.to_string(),
            sha256: sha256_hex(contents.as_bytes()),
            bytes: contents.len() as u64,
        });
        Ok(())
    }

    fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        self.inputs.push(OutputDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }
}

/// Write through a temporary file in the same directory, then rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::io(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

struct Context {
    seed: u64,
    out: Outputs,
    resolved: Value,
}

impl Context {
    fn resolve(&mut self, v: &impl Serialize) {
        self.resolved = serde_json::to_value(v).unwrap_or(Value::Null);
    }
}

fn load_config(common: &Common, command: &str) -> CliResult<ExperimentConfig> {
    let Some(path) = &common.config else {
        return Ok(ExperimentConfig::default());
    };
    let cfg: ExperimentConfig = serde_json::from_str(&read_text(path)?)
        .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    if let Some(c) = &cfg.command {
        if c != command {
            return Err(CliError::validation(format!(
                "config is for '{c}' but the subcommand is '{command}'"
            )));
        }
    }
    Ok(cfg)
}

fn execute<P, F>(
    command: &str,
    run: Run<P>,
    section: fn(&ExperimentConfig) -> &P,
    streams: &[&str],
    body: F,
) -> CliResult<()>
where
    P: Args + Clone + Serialize,
    F: FnOnce(&P, &mut Context) -> CliResult<()>,
    P: Merge,
{
    let started = Instant::now();
    let file = load_config(&run.common, command)?;
    let params = run.params.merge(section(&file).clone());
    let seed = run.common.seed.or(file.seed).unwrap_or(0);
    if let Some(n) = run.common.threads.or(file.threads) {
        if n == 0 {
            return Err(CliError::validation("--threads must be at least 1"));
        }
        par::set_threads(n).map_err(CliError::validation)?;
    }
    let out_dir = run
        .common
        .out
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let mut ctx = Context {
        seed,
        out: Outputs::new(out_dir)?,
        resolved: Value::Null,
    };
    body(&params, &mut ctx)?;
    let manifest = RunManifest {
        command: command.to_string(),
        config: serde_json::to_value(&params).map_err(|e| CliError::validation(e.to_string()))?,
        resolved: ctx.resolved.clone(),
        seed,
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        parallel: par::is_parallel(),
        seed_streams: streams.iter().map(|s| s.to_string()).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        inputs: ctx.out.inputs.clone(),
        outputs: ctx.out.written.clone(),
    };
    write_atomic(&ctx.out.dir.join(MANIFEST), pretty(&manifest)?.as_bytes())
}

/// Field-wise override of a config-file block by flags.
pub trait Merge {
    fn merge(self, file: Self) -> Self;
}

macro_rules! merge_impl {
    ($($t:ty),*) => {$(impl Merge for $t { fn merge(self, file: Self) -> Self { self.merged(file) } })*};
}
merge_impl!(
    TrainRatioParams,
    EstimateParams,
    ResampleParams,
    MetricsParams,
    Fig1Params,
    AugmentParams,
    OpeParams,
    BiasVarianceParams
);

fn train_ratio(p: &TrainRatioParams, ctx: &mut Context) -> CliResult<()> {
    let pos_path = require(p.positives.clone(), "positives")?;
    let neg_path = require(p.negatives.clone(), "negatives")?;
    ctx.out.input(&pos_path)?;
    ctx.out.input(&neg_path)?;
    let dataset = LabeledRatioDataset::new(
        points(read_matrix(&pos_path)?)?,
        points(read_matrix(&neg_path)?)?,
    )?;
    let defaults = TrainConfig::default();
    let config = TrainConfig {
        architecture: match &p.architecture {
            Some(s) => parse_enum::<Architecture>("architecture", s)?,
            None => defaults.architecture,
        },
        optimizer: match &p.optimizer {
            Some(s) => parse_enum::<Optimizer>("optimizer", s)?,
            None => defaults.optimizer,
        },
        learning_rate: p.learning_rate.unwrap_or(defaults.learning_rate),
        epochs: p.epochs.unwrap_or(defaults.epochs),
        batch_size: p.batch_size.unwrap_or(defaults.batch_size),
        hidden_units: p.hidden_units.unwrap_or(defaults.hidden_units),
        l2_penalty: p.l2_penalty.unwrap_or(defaults.l2_penalty),
        momentum: p.momentum.unwrap_or(defaults.momentum),
        seed: rng::derive_seed(ctx.seed, "train", 0),
    };
    ctx.resolve(&config);
    let (clf, history) = train_classifier_with_history(&dataset, &config)?;
    let report = calibration_report(&clf, &dataset, p.calibration_bins.unwrap_or(10))?;
    ctx.out.write("classifier.json", &(clf.to_json()? + "\n"))?;
    ctx.out.write("calibration.csv", &report.to_csv())?;
    println!("ece {}", report.ece);
    let summary = json!({
        "gamma": dataset.gamma(),
        "n_positives": dataset.positives().len(),
        "n_negatives": dataset.negatives().len(),
        "final_loss": history.last(),
        "ece": report.ece,
        "train": config,
    });
    ctx.out.write("training.json", &pretty(&summary)?)?;
    let mut loss = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        loss.push_str(&format!("{},{}\n", i + 1, l));
    }
    ctx.out.write("loss.csv", &loss)
}

fn estimate(p: &EstimateParams, ctx: &mut Context) -> CliResult<()> {
    let clf_path = require(p.classifier.clone(), "classifier")?;
    let samples_path = require(p.samples.clone(), "samples")?;
    ctx.out.input(&clf_path)?;
    ctx.out.input(&samples_path)?;
    let clf = ProbClassifier::from_json(&read_text(&clf_path)?)?;
    let xs = points(read_matrix(&samples_path)?)?;
    let values = match &p.values {
        Some(path) => {
            ctx.out.input(path)?;
            read_column(path)?
        }
        None => xs.iter().map(SamplePoint::first).collect(),
    };
    let config = WeightConfig {
        gamma: p.gamma.unwrap_or(1.0),
        alpha: p.alpha.unwrap_or(1.0),
        beta: p.beta.unwrap_or(0.0),
        self_normalize: p.self_normalize.unwrap_or(false),
    };
    config.validate()?;
    ctx.resolve(&config);
    let raw = importance_weights(&clf, config.gamma, &xs)?;
    let transformed = transform_weights(&raw, &config)?;
    let report = estimate_from_values(&raw, &values, &config)?;
    let interval = match p.bootstrap_n.unwrap_or(0) {
        0 => None,
        n => {
            let boot = BootstrapConfig {
                n_resamples: n,
                confidence: p.confidence.unwrap_or(0.95),
                seed: rng::derive_seed(ctx.seed, "bootstrap", 0),
                ..BootstrapConfig::default()
            };
            let iv = bootstrap_estimate(&raw, &values, &config, &boot)?;
            Some(
                json!({"confidence": boot.confidence, "resamples": n, "lower": iv.lower, "upper": iv.upper}),
            )
        }
    };
    let summary = json!({
        "value": report.value,
        "stderr": report.stderr,
        "batch_size": report.batch_size,
        "weight_stats": report.weight_stats,
        "config": config,
        "interval": interval,
    });
    ctx.out.write("estimate.json", &pretty(&summary)?)?;
    let mut csv = String::from("raw_weight,transformed_weight\n");
    for (r, t) in raw.iter().zip(&transformed) {
        csv.push_str(&format!("{r},{t}\n"));
    }
    ctx.out.write("weights.csv", &csv)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairDocument {
    p: Vec<f64>,
    p_theta: Vec<f64>,
    weights: Option<Vec<f64>>,
}

fn resample(p: &ResampleParams, ctx: &mut Context) -> CliResult<()> {
    let (pair, w) = match &p.pair {
        Some(path) => {
            ctx.out.input(path)?;
            let doc: PairDocument = serde_json::from_str(&read_text(path)?)
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
            let pair = DiscreteDistributionPair::new(doc.p, doc.p_theta)?;
            let w = doc.weights.unwrap_or_else(|| pair.oracle_weights());
            (pair, w)
        }
        None => {
            let k = p.symbols.unwrap_or(10);
            if k < 2 {
                return Err(CliError::validation("--symbols must be at least 2"));
            }
            random_triple(&mut rng::stream(ctx.seed, "pair", 0), k)
        }
    };
    if w.len() != pair.len() {
        return Err(Error::DimensionMismatch {
            expected: pair.len(),
            found: w.len(),
        }
        .into());
    }
    let particles = p.particles.clone().unwrap_or_else(|| vec![1, 10, 100]);
    let draws = p.draws.unwrap_or(100_000);
    let target = pair.resampled(&w)?;
    let diagnostics = pair.exact_kl_diagnostics(&w)?;
    let sampler = CategoricalSampler::new(pair.p_theta())?;
    let mut columns = Vec::new();
    let mut tv = serde_json::Map::new();
    for (i, &t) in particles.iter().enumerate() {
        let model =
            ResampledModel::new(sampler.clone(), |x: &SamplePoint| w[x.first() as usize], t)?;
        let sir = model.sir_draws(draws, rng::derive_seed(ctx.seed, "sir", i as u64))?;
        let emp = empirical_distribution(&sir, pair.len());
        tv.insert(
            format!("T={t}"),
            json!(stats::total_variation(&emp, &target)),
        );
        columns.push(emp);
    }
    let mut csv = String::from("symbol,p,p_theta,weight,target");
    for t in &particles {
        csv.push_str(&format!(",sir_T{t}"));
    }
    csv.push('\n');
    for k in 0..pair.len() {
        let mut row = vec![pair.p()[k], pair.p_theta()[k], w[k], target[k]];
        row.extend(columns.iter().map(|c| c[k]));
        csv.push_str(&format!("{k},{}\n", f64_row(&row)));
    }
    ctx.out.write("sir.csv", &csv)?;
    let summary = json!({
        "delta_estimate": diagnostics.delta_estimate,
        "nec1_gap": diagnostics.nec1_gap,
        "nec2_gap": diagnostics.nec2_gap,
        "verdict": diagnostics.verdict,
        "kl_p_ptheta": pair.kl(),
        "exact_delta_kl": pair.exact_delta_kl(&w)?,
        "partition": pair.exact_partition(&w)?,
        "diagnostics": diagnostics,
        "draws": draws,
        "tv_to_target": tv,
    });
    ctx.out.write("diagnostics.json", &pretty(&summary)?)
}

fn metrics(p: &MetricsParams, ctx: &mut Context) -> CliResult<()> {
    let model_path = require(p.model.clone(), "model")?;
    let real_path = require(p.real.clone(), "real")?;
    ctx.out.input(&model_path)?;
    ctx.out.input(&real_path)?;
    let model = FeatureSet::new(read_matrix(&model_path)?)?;
    let real = FeatureSet::new(read_matrix(&real_path)?)?;
    let weights = match &p.weights {
        Some(path) => {
            ctx.out.input(path)?;
            read_weights(path)?
        }
        None => vec![1.0; model.len()],
    };
    let preds = match &p.model_probs {
        Some(path) => {
            ctx.out.input(path)?;
            Some(LabelDistribution::new(read_matrix(path)?)?)
        }
        None => None,
    };
    let config = WeightConfig {
        alpha: p.alpha.unwrap_or(1.0),
        beta: p.beta.unwrap_or(0.0),
        self_normalize: p.self_normalize.unwrap_or(true),
        ..WeightConfig::default()
    };
    ctx.resolve(&config);
    let suite = debiased_metric_suite(
        &model,
        &real,
        preds.as_ref(),
        &weights,
        &config,
        p.bandwidth.unwrap_or(1.0),
    )?;
    ctx.out.write("metrics.json", &pretty(&suite)?)
}

fn fig1(p: &Fig1Params, ctx: &mut Context) -> CliResult<()> {
    let n = p.n.unwrap_or(1000);
    let resamples = p.resamples.unwrap_or(1000);
    let mut config = Fig1Config::for_seed(n, ctx.seed, (resamples > 0).then_some(resamples));
    if let Some(e) = p.epochs {
        config.train.epochs = e;
    }
    if let Some(lr) = p.learning_rate {
        config.train.learning_rate = lr;
    }
    if let (Some(w), Some(b)) = (p.warm_start_epochs, config.bootstrap.as_mut()) {
        b.warm_start_epochs = (w > 0).then_some(w);
    }
    ctx.resolve(&config);
    let r = run_fig1_experiment(&config)?;
    ctx.out.write("curve.csv", &r.to_csv())?;
    let summary = json!({
        "n_per_class": n,
        "mean_abs_gap": r.mean_abs_gap,
        "gamma": r.gamma,
        "median_band_width": r.median_band_width(),
        "model": r.model,
    });
    ctx.out.write("summary.json", &pretty(&summary)?)
}

fn augment(p: &AugmentParams, ctx: &mut Context) -> CliResult<()> {
    let d = AugmentConfig::default();
    let config = AugmentConfig {
        m: p.m.unwrap_or(d.m),
        weights: match &p.weights {
            Some(s) => parse_enum::<AugmentWeights>("weights", s)?,
            None => d.weights,
        },
        n_real: p.n_real.unwrap_or(d.n_real),
        n_generated: p.n_generated.unwrap_or(d.n_generated),
        n_test: p.n_test.unwrap_or(d.n_test),
        outlier_rate: p.outlier_rate.unwrap_or(d.outlier_rate),
        iterations: p.iterations.unwrap_or(d.iterations),
        seed: ctx.seed,
        ..d
    };
    ctx.resolve(&config);
    let r = run_augmentation_experiment(&config)?;
    ctx.out.write("accuracy.json", &pretty(&r)?)
}

fn ope(p: &OpeParams, ctx: &mut Context) -> CliResult<()> {
    let [env_json, b_json, e_json] = mbope::chain4_json();
    let mut load = |path: &Option<PathBuf>, bundled: &str| -> CliResult<String> {
        match path {
            Some(path) => {
                ctx.out.input(path)?;
                read_text(path)
            }
            None => Ok(bundled.to_string()),
        }
    };
    let env = Mdp::from_json(&load(&p.env, env_json)?)?;
    let behavior = Policy::from_json(&load(&p.behavior, b_json)?)?;
    let eval = Policy::from_json(&load(&p.eval, e_json)?)?;
    let d = OpeConfig::default();
    let mut train = mbope::transition_train_config(0);
    if let Some(e) = p.epochs {
        train.epochs = e;
    }
    let config = OpeConfig {
        n_traj: p.n_traj.unwrap_or(d.n_traj),
        horizon: p.horizon,
        h_values: p.h_sweep.clone().unwrap_or_default(),
        seed: ctx.seed,
        n_classifiers: p.n_classifiers.unwrap_or(d.n_classifiers),
        corruption: p.corruption.unwrap_or(d.corruption),
        self_normalize: p.self_normalize.unwrap_or(d.self_normalize),
        n_bags: p.n_bags.unwrap_or(d.n_bags),
        train,
        ..d
    };
    ctx.resolve(&config);
    let r = mbope::run_ope_experiment(&env, &behavior, &eval, &config)?;
    ctx.out.write("curve.csv", &mbope::sweep_to_csv(&r.curve))?;
    let summary = json!({
        "truth": r.truth,
        "horizon": r.horizon,
        "model_value": r.model_value,
        "lfiw_value": r.lfiw_value,
        "stepwise_value": r.stepwise_value,
    });
    ctx.out.write("summary.json", &pretty(&summary)?)
}

fn bias_variance(p: &BiasVarianceParams, ctx: &mut Context) -> CliResult<()> {
    let d = MomentToyConfig::for_seed(ctx.seed);
    let config = MomentToyConfig {
        n_fit: p.n_fit.unwrap_or(d.n_fit),
        n_train: p.n_train.unwrap_or(d.n_train),
        batch_size: p.batch_size.unwrap_or(d.batch_size),
        ..d
    };
    ctx.resolve(&config);
    let toy = MomentToy::build(&config)?;
    let truth = [toy.mixture.mean(), toy.truth()];
    let statistics = vec![
        Statistic::new("x", |p: &SamplePoint| p.first()),
        Statistic::new("x2", |p: &SamplePoint| p.first() * p.first()),
    ];
    let grid = standard_config_grid();
    let reports = bias_variance_decompose(
        &grid,
        &statistics,
        &truth,
        |t| toy.batch(t),
        p.trials.unwrap_or(20),
    )?;
    let mut csv = String::from("alpha,beta,self_normalize,statistic,bias,variance,mse\n");
    for r in &reports {
        for rec in &r.records {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.config.alpha,
                r.config.beta,
                r.config.self_normalize,
                rec.statistic_id,
                rec.bias,
                rec.variance,
                rec.mse
            ));
        }
    }
    ctx.out.write("bias_variance.csv", &csv)?;
    let best = reports
        .iter()
        .min_by(|a, b| a.records[1].bias.abs().total_cmp(&b.records[1].bias.abs()))
        .map(|r| r.config.label());
    let identity = reports
        .iter()
        .flat_map(|r| &r.records)
        .map(|rec| (rec.mse - rec.bias * rec.bias - rec.variance).abs())
        .fold(0.0, f64::max);
    let summary = json!({
        "truth": {"x": truth[0], "x2": truth[1]},
        "model_second_moment": toy.model.second_moment(),
        "lowest_abs_bias_x2": best,
        "max_identity_error": identity,
    });
    ctx.out.write("summary.json", &pretty(&summary)?)
}

/// Exit status 0 when every listed artifact matches, 1 on a digest mismatch.
pub fn verify(manifest_path: &Path) -> CliResult<i32> {
    let text = read_text(manifest_path)?;
    let manifest: RunManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(format!("{}: {e}", manifest_path.display())))?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut mismatched = Vec::new();
    for o in &manifest.outputs {
        let path = dir.join(&o.path);
        let bytes =
            fs::read(&path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        if sha256_hex(&bytes) != o.sha256 {
            mismatched.push(o.path.clone());
        }
    }
    if mismatched.is_empty() {
        Ok(0)
    } else {
        Err(CliError::new(
            "verification",
            1,
            format!("digest mismatch: {}", mismatched.join(", ")),
        ))
    }
}

/// Runs a parsed command line and returns the process exit status.
pub fn run(cli: Cli) -> CliResult<i32> {
    match cli.command {
        Command::TrainRatio(r) => execute(
            "train-ratio",
            r,
            |c| &c.train_ratio,
            &["train", "init", "shuffle"],
            train_ratio,
        ),
        Command::Estimate(r) => execute("estimate", r, |c| &c.estimate, &[], estimate),
        Command::Resample(r) => execute("resample", r, |c| &c.resample, &["pair", "sir"], resample),
        Command::Metrics(r) => execute("metrics", r, |c| &c.metrics, &[], metrics),
        Command::Fig1(r) => execute(
            "fig1",
            r,
            |c| &c.fig1,
            &["data", "train", "init", "shuffle", "bootstrap"],
            fig1,
        ),
        Command::Augment(r) => execute(
            "augment",
            r,
            |c| &c.augment,
            &["data", "init", "shuffle"],
            augment,
        ),
        Command::Ope(r) => execute(
            "ope",
            r,
            |c| &c.ope,
            &[
                "behavior",
                "rollout",
                "classifier",
                "negatives",
                "init",
                "shuffle",
            ],
            ope,
        ),
        Command::BiasVariance(r) => execute(
            "bias-variance",
            r,
            |c| &c.bias_variance,
            &["pilot", "data", "train", "init", "shuffle", "batch"],
            bias_variance,
        ),
        Command::Verify { manifest } => return verify(&manifest),
    }
    .map(|()| 0)
}

/// Entry point for the binary: parse, run, report.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::validation(first).to_json_line());
            return 2;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.code
        }
    }
}
