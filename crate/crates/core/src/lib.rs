//! Post-hoc out-of-distribution detection from a frozen classifier's
//! penultimate features.
//!
//! The pipeline: perturb the classifier rows into a cone of `r` directions
//! per class ([`perturb`]), score samples by mean softmax confidence over the
//! cone ([`scores`]), and compare per-sample activation histograms against
//! training means ([`density`], [`kld`]). [`eval`] and [`tune`] measure and
//! select, [`synth`] generates a small benchmark with a known geometry.

pub mod cli;
pub mod data;
pub mod density;
pub mod error;
pub mod eval;
pub mod kld;
pub mod parallel;
pub mod perturb;
mod rng;
pub mod scores;
pub mod synth;
pub mod tune;

pub use data::{DatasetBundle, FeatureMatrix, Matrix, OodKind, OodSet, WeightMatrix};
pub use density::{BinSpec, Histogram, MeanDensity};
pub use error::{Error, Result};
pub use kld::{fit, KldHyperparams, Scorer, WeiPerKldModel};
pub use perturb::{build_perturbed_weights, PerturbationConfig, PerturbedWeights};
