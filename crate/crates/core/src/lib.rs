//! Likelihood-free importance weighting.
//!
//! A probabilistic classifier trained to tell target samples from model
//! samples yields density-ratio estimates, which are used to debias Monte
//! Carlo estimates, resample the model, reweight feature-space metrics and
//! correct model-based policy evaluation.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod mbope;
pub mod metrics;
pub mod par;
pub mod ratio;
pub mod resample;
pub mod rng;
pub mod sampling;
pub mod stats;
pub mod synthetic;

pub use error::{Error, Result};
pub use ratio::{
    importance_weight, train_classifier, LabeledRatioDataset, ProbClassifier, SamplePoint,
    TrainConfig,
};
