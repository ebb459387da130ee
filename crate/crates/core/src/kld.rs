//! The combined WeiPer+KLD detector.
//!
//! Per sample `z` the raw OOD score is
//!
//! ```text
//! D(z | penultimate, s1) + lambda1 * D(z | perturbed logits, s2) - lambda2 * MSP_W(z)
//! ```
//!
//! where `D` is the symmetric KL divergence between the sample's smoothed
//! fingerprint and the epsilon-floored mean training fingerprint. The emitted
//! score is its negation, so higher means more in-distribution.
//!
//! Fitting streams the training set in sample batches and only keeps integer
//! bin counts, so the full N×(r·C) perturbed logit matrix is never held.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{load_tensor, save_tensor, save_values, FeatureMatrix, Matrix, WeightMatrix};
use crate::density::{self, bin_counts, BinSpec, MeanDensity, ValueRange, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::parallel;
use crate::perturb::{
    batch_ranges, build_perturbed_weights, project_rows, project_sample, NoiseSharing,
    PerturbationConfig, PerturbedWeights,
};
use crate::scores::{fit_react_threshold, msp, msp_w, react_clip, ReactThreshold};

pub const DEFAULT_BATCH_SIZE: usize = 1024;
pub const MODEL_FORMAT_VERSION: u32 = 1;

fn default_react_percentile() -> f64 {
    90.0
}

/// Missing JSON fields take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KldHyperparams {
    pub r: usize,
    pub delta: f64,
    pub n_bins: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub s1: usize,
    pub s2: usize,
    pub eps: f64,
    pub seed: u64,
    pub react_percentile: f64,
    pub noise_sharing: NoiseSharing,
}

impl Default for KldHyperparams {
    /// Defaults used when a config omits a field.
    fn default() -> Self {
        Self {
            r: 100,
            delta: 1.8,
            n_bins: 100,
            lambda1: 2.5,
            lambda2: 0.1,
            s1: 4,
            s2: 40,
            eps: DEFAULT_EPS,
            seed: 0,
            react_percentile: default_react_percentile(),
            noise_sharing: NoiseSharing::PerRow,
        }
    }
}

impl KldHyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.r < 1 {
            return bad("r must be >= 1".into());
        }
        if self.n_bins < 2 {
            return bad(format!("n_bins must be >= 2, got {}", self.n_bins));
        }
        if self.s1 < 1 || self.s2 < 1 {
            return bad(format!("s1 and s2 must be >= 1, got {} and {}", self.s1, self.s2));
        }
        for (name, v) in [("delta", self.delta), ("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps must be finite and > 0, got {}", self.eps));
        }
        if !(self.react_percentile > 0.0 && self.react_percentile <= 100.0) {
            return bad(format!("react_percentile must be in (0, 100], got {}", self.react_percentile));
        }
        Ok(())
    }

    pub fn perturbation(&self) -> PerturbationConfig {
        let mut cfg = PerturbationConfig::new(self.r, self.delta, self.seed);
        cfg.sharing = self.noise_sharing;
        cfg
    }
}

/// The three per-sample quantities the combined score is built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleTerms {
    pub d_pen: f64,
    pub d_pert: f64,
    pub msp_w: f64,
}

/// Negated combined OOD score (higher = more ID).
#[inline]
pub fn combine(t: &SampleTerms, lambda1: f64, lambda2: f64) -> f64 {
    -(t.d_pen + lambda1 * t.d_pert - lambda2 * t.msp_w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeiPerKldModel {
    hyper: KldHyperparams,
    head: WeightMatrix,
    perturbed: PerturbedWeights,
    pen_bins: BinSpec,
    pert_bins: BinSpec,
    pen_counts: Vec<u64>,
    pert_counts: Vec<u64>,
    pen_mean: MeanDensity,
    pert_mean: MeanDensity,
    react: ReactThreshold,
    n_train: usize,
}

/// Summed per-sample bin counts over every row of `values`.
pub(crate) fn summed_counts(values: &Matrix, bins: &BinSpec) -> Vec<u64> {
    let per_row = parallel::map_indexed(values.rows(), |n| bin_counts(values.row(n), bins));
    let mut total = vec![0u64; bins.n_bins];
    for c in per_row {
        for (t, x) in total.iter_mut().zip(c) {
            *t += x;
        }
    }
    total
}

pub(crate) fn matrix_range(values: &Matrix) -> ValueRange {
    parallel::map_indexed(values.rows(), |n| ValueRange::of(values.row(n)))
        .into_iter()
        .fold(ValueRange::default(), ValueRange::merge)
}

/// Pooled min/max of the perturbed logits of `features`, one batch at a time.
pub(crate) fn perturbed_range(
    features: &FeatureMatrix,
    pw: &PerturbedWeights,
    bias: &[f32],
    batch_size: usize,
) -> Result<ValueRange> {
    let mut range = ValueRange::default();
    for rows in batch_ranges(features.n_samples(), batch_size) {
        range = range.merge(matrix_range(&project_rows(features, rows, pw, Some(bias))?));
    }
    Ok(range)
}

pub fn fit(train: &FeatureMatrix, head: &WeightMatrix, hyper: &KldHyperparams) -> Result<WeiPerKldModel> {
    fit_batched(train, head, hyper, DEFAULT_BATCH_SIZE)
}

pub fn fit_batched(
    train: &FeatureMatrix,
    head: &WeightMatrix,
    hyper: &KldHyperparams,
    batch_size: usize,
) -> Result<WeiPerKldModel> {
    hyper.validate()?;
    train.expect_features(head.n_features(), "training features vs classifier head")?;
    let pw = build_perturbed_weights(head, &hyper.perturbation())?;

    let pen_bins = matrix_range(train.matrix()).to_bins(hyper.n_bins)?;
    let pert_bins = perturbed_range(train, &pw, head.bias(), batch_size)?.to_bins(hyper.n_bins)?;

    let pen_counts = summed_counts(train.matrix(), &pen_bins);
    let mut pert_counts = vec![0u64; hyper.n_bins];
    for rows in batch_ranges(train.n_samples(), batch_size) {
        let logits = project_rows(train, rows, &pw, Some(head.bias()))?;
        for (t, x) in pert_counts.iter_mut().zip(summed_counts(&logits, &pert_bins)) {
            *t += x;
        }
    }
    let n = train.n_samples();
    let react = fit_react_threshold(train, hyper.react_percentile)?;
    log::debug!(
        "fit: n={n} K={} width={} pen_bins=[{}, {}] pert_bins=[{}, {}]",
        train.n_features(),
        pw.width(),
        pen_bins.lo,
        pen_bins.hi,
        pert_bins.lo,
        pert_bins.hi
    );
    WeiPerKldModel::from_parts(
        hyper.clone(),
        head.clone(),
        pw,
        pen_bins,
        pert_bins,
        pen_counts,
        pert_counts,
        react,
        n,
    )
}

/// Which score to emit from a fitted model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// Maximum softmax probability of the unperturbed logits.
    Msp,
    /// Mean MSP over the perturbed logit blocks.
    MspW,
    /// MSP_W on ReAct-clipped features.
    React,
    /// The combined fingerprint detector.
    Kld,
}

impl Scorer {
    pub const ALL: [Scorer; 4] = [Scorer::Msp, Scorer::MspW, Scorer::React, Scorer::Kld];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Msp => "msp",
            Scorer::MspW => "msp_w",
            Scorer::React => "react",
            Scorer::Kld => "kld",
        }
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown scorer {s:?} (msp, msp_w, react, kld)")))
    }
}

impl WeiPerKldModel {
    #[allow(clippy::too_many_arguments)]
    fn from_parts(
        hyper: KldHyperparams,
        head: WeightMatrix,
        perturbed: PerturbedWeights,
        pen_bins: BinSpec,
        pert_bins: BinSpec,
        pen_counts: Vec<u64>,
        pert_counts: Vec<u64>,
        react: ReactThreshold,
        n_train: usize,
    ) -> Result<Self> {
        let pen_mean = MeanDensity::from_counts(pen_bins, &pen_counts, n_train, hyper.eps)?;
        let pert_mean = MeanDensity::from_counts(pert_bins, &pert_counts, n_train, hyper.eps)?;
        Ok(Self {
            hyper,
            head,
            perturbed,
            pen_bins,
            pert_bins,
            pen_counts,
            pert_counts,
            pen_mean,
            pert_mean,
            react,
            n_train,
        })
    }

    pub fn hyper(&self) -> &KldHyperparams {
        &self.hyper
    }

    pub fn head(&self) -> &WeightMatrix {
        &self.head
    }

    pub fn perturbed(&self) -> &PerturbedWeights {
        &self.perturbed
    }

    pub fn pen_bins(&self) -> &BinSpec {
        &self.pen_bins
    }

    pub fn pert_bins(&self) -> &BinSpec {
        &self.pert_bins
    }

    pub fn pen_mean(&self) -> &MeanDensity {
        &self.pen_mean
    }

    pub fn pert_mean(&self) -> &MeanDensity {
        &self.pert_mean
    }

    pub fn react(&self) -> &ReactThreshold {
        &self.react
    }

    pub fn n_features(&self) -> usize {
        self.head.n_features()
    }

    /// Fingerprint and confidence terms for one sample given its perturbed logits.
    pub fn sample_terms(&self, z: &[f32], pert_logits: &[f32]) -> Result<SampleTerms> {
        let h = &self.hyper;
        Ok(SampleTerms {
            d_pen: density::fingerprint_divergence(&bin_counts(z, &self.pen_bins), h.s1, h.eps, &self.pen_mean)?,
            d_pert: density::fingerprint_divergence(
                &bin_counts(pert_logits, &self.pert_bins),
                h.s2,
                h.eps,
                &self.pert_mean,
            )?,
            msp_w: msp_w(pert_logits, self.perturbed.repeats(), self.perturbed.classes())?,
        })
    }

    pub fn terms(&self, batch: &FeatureMatrix, batch_size: usize) -> Result<Vec<SampleTerms>> {
        batch.expect_features(self.n_features(), "feature dimension vs model")?;
        let mut out = Vec::with_capacity(batch.n_samples());
        for rows in batch_ranges(batch.n_samples(), batch_size) {
            let start = rows.start;
            let logits = project_rows(batch, rows.clone(), &self.perturbed, Some(self.head.bias()))?;
            let terms = parallel::map_indexed(rows.len(), |n| self.sample_terms(batch.row(start + n), logits.row(n)));
            for t in terms {
                out.push(t?);
            }
        }
        Ok(out)
    }

    /// WeiPer+KLD scores, higher = more in-distribution.
    pub fn score(&self, batch: &FeatureMatrix) -> Result<Vec<f64>> {
        self.score_with(Scorer::Kld, batch, DEFAULT_BATCH_SIZE)
    }

    pub fn score_with(&self, scorer: Scorer, batch: &FeatureMatrix, batch_size: usize) -> Result<Vec<f64>> {
        batch.expect_features(self.n_features(), "feature dimension vs model")?;
        let n = batch.n_samples();
        let pw = &self.perturbed;
        match scorer {
            Scorer::Kld => {
                let (l1, l2) = (self.hyper.lambda1, self.hyper.lambda2);
                Ok(self.terms(batch, batch_size)?.iter().map(|t| combine(t, l1, l2)).collect())
            }
            Scorer::Msp => Ok(parallel::map_indexed(n, |i| msp(&self.head.logits(batch.row(i))))),
            Scorer::MspW | Scorer::React => parallel::map_indexed(n, |i| {
                let mut buf = vec![0f32; pw.width()];
                if scorer == Scorer::React {
                    project_sample(&react_clip(batch.row(i), &self.react), pw, Some(self.head.bias()), &mut buf);
                } else {
                    project_sample(batch.row(i), pw, Some(self.head.bias()), &mut buf);
                }
                msp_w(&buf, pw.repeats(), pw.classes())
            })
            .into_iter()
            .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensor(dir.join("perturbed_weights.wpft"), self.perturbed.matrix())?;
        save_tensor(dir.join("weights.wpft"), &self.head)?;
        save_values(dir.join("bias.wpft"), 1, self.head.n_classes(), self.head.bias().to_vec())?;
        for (name, mean) in [("pen_mean", &self.pen_mean), ("pert_mean", &self.pert_mean)] {
            let probs: Vec<f32> = mean.hist.probs.iter().map(|&p| p as f32).collect();
            save_values(dir.join(format!("{name}.wpft")), 1, probs.len(), probs)?;
        }
        let doc = ModelDoc {
            format_version: MODEL_FORMAT_VERSION,
            hyper: self.hyper.clone(),
            n_train: self.n_train,
            classes: self.head.n_classes(),
            features: self.head.n_features(),
            pen_bins: self.pen_bins,
            pert_bins: self.pert_bins,
            pen_counts: self.pen_counts.clone(),
            pert_counts: self.pert_counts.clone(),
            react: ReactDoc::from(self.react),
        };
        let path = dir.join("model.json");
        let text = serde_json::to_string_pretty(&doc).expect("model serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let doc: ModelDoc = serde_json::from_str(&text).map_err(|source| Error::Json { path, source })?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::MissingData(format!(
                "model format version {} not supported",
                doc.format_version
            )));
        }
        doc.hyper.validate()?;
        let head = WeightMatrix::with_bias(
            load_tensor(dir.join("weights.wpft"))?,
            load_tensor(dir.join("bias.wpft"))?.into_vec(),
        )?;
        let perturbed = PerturbedWeights::from_parts(
            load_tensor(dir.join("perturbed_weights.wpft"))?,
            doc.hyper.r,
            doc.hyper.delta,
            doc.hyper.seed,
        )?;
        if perturbed.classes() != head.n_classes() || perturbed.n_features() != head.n_features() {
            return Err(Error::DimensionMismatch {
                context: "perturbed weights vs classifier head",
                expected: head.n_classes() * doc.hyper.r,
                found: perturbed.width(),
            });
        }
        Self::from_parts(
            doc.hyper,
            head,
            perturbed,
            doc.pen_bins,
            doc.pert_bins,
            doc.pen_counts,
            doc.pert_counts,
            doc.react.into(),
            doc.n_train,
        )
    }
}

/// JSON cannot hold an infinite clip value, so "never clip" is `null`.
#[derive(Serialize, Deserialize)]
struct ReactDoc {
    clip: Option<f32>,
    percentile: f64,
}

impl From<ReactThreshold> for ReactDoc {
    fn from(t: ReactThreshold) -> Self {
        Self {
            clip: t.clip.is_finite().then_some(t.clip),
            percentile: t.percentile,
        }
    }
}

impl From<ReactDoc> for ReactThreshold {
    fn from(d: ReactDoc) -> Self {
        Self {
            clip: d.clip.unwrap_or(f32::INFINITY),
            percentile: d.percentile,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    hyper: KldHyperparams,
    n_train: usize,
    classes: usize,
    features: usize,
    pen_bins: BinSpec,
    pert_bins: BinSpec,
    pen_counts: Vec<u64>,
    pert_counts: Vec<u64>,
    react: ReactDoc,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, k: usize, c: usize, salt: f32) -> (FeatureMatrix, WeightMatrix) {
        let z = FeatureMatrix::new(n, k, (0..n * k).map(|i| ((i as f32 + salt) * 0.731).sin().abs() * 3.0).collect()).unwrap();
        let w = WeightMatrix::new(
            Matrix::new(c, k, (0..c * k).map(|i| ((i as f32) * 1.37 + 0.2).cos()).collect()).unwrap(),
        )
        .unwrap();
        (z, w)
    }

    fn hyper(r: usize, delta: f64) -> KldHyperparams {
        KldHyperparams { r, delta, n_bins: 20, lambda1: 1.0, lambda2: 0.5, s1: 3, s2: 4, ..Default::default() }
    }

    #[test]
    fn means_are_normalized() {
        let (z, w) = toy(40, 16, 3, 0.0);
        let m = fit(&z, &w, &hyper(5, 1.0)).unwrap();
        for mean in [m.pen_mean(), m.pert_mean()] {
            assert!((mean.hist.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(mean.n_contributors, 40);
        }
    }

    #[test]
    fn zero_delta_repeats_do_not_change_proportions() {
        let (z, w) = toy(30, 12, 4, 1.0);
        let a = fit(&z, &w, &hyper(1, 0.0)).unwrap();
        let b = fit(&z, &w, &hyper(6, 0.0)).unwrap();
        assert_eq!(a.pert_bins(), b.pert_bins());
        for (x, y) in a.pert_mean().hist.probs.iter().zip(&b.pert_mean().hist.probs) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn fit_is_deterministic_and_batch_independent() {
        let (z, w) = toy(50, 10, 3, 2.0);
        let a = fit_batched(&z, &w, &hyper(4, 2.0), 7).unwrap();
        let b = fit_batched(&z, &w, &hyper(4, 2.0), 1024).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lambdas_zero_reduces_to_penultimate_divergence() {
        let (z, w) = toy(30, 10, 3, 3.0);
        let mut h = hyper(3, 1.0);
        h.lambda1 = 0.0;
        h.lambda2 = 0.0;
        let m = fit(&z, &w, &h).unwrap();
        let (test, _) = toy(5, 10, 3, 99.0);
        let scores = m.score(&test).unwrap();
        for (i, s) in scores.iter().enumerate() {
            let hist = density::histogram(test.row(i), m.pen_bins()).unwrap();
            let d = density::sym_kl(&density::smooth(&hist, h.s1, h.eps).unwrap(), &m.pen_mean().hist).unwrap();
            assert_eq!(*s, -d);
        }
    }

    #[test]
    fn single_training_sample_scores_zero() {
        let z = FeatureMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let w = WeightMatrix::new(Matrix::from_rows(&[vec![1.0, 0.5]]).unwrap()).unwrap();
        let h = KldHyperparams { r: 2, delta: 0.5, n_bins: 2, lambda1: 0.0, lambda2: 0.0, s1: 1, s2: 1, ..Default::default() };
        let m = fit(&z, &w, &h).unwrap();
        assert_eq!(m.pen_mean().hist.probs, vec![0.5, 0.5]);
        assert_eq!(m.score(&z).unwrap(), vec![0.0]);
    }

    #[test]
    fn large_lambda2_ranks_like_msp_w() {
        let (z, w) = toy(60, 12, 3, 4.0);
        let mut h = hyper(4, 1.5);
        h.lambda1 = 0.0;
        let (test, _) = toy(25, 12, 3, 17.0);
        let probe = fit(&z, &w, &h).unwrap();
        let terms = probe.terms(&test, 8).unwrap();
        let max_kl = terms.iter().map(|t| t.d_pen.abs()).fold(0.0, f64::max);
        h.lambda2 = 1e6 * max_kl.max(1e-12);
        let m = fit(&z, &w, &h).unwrap();
        let kld = m.score(&test).unwrap();
        let mspw = m.score_with(Scorer::MspW, &test, 8).unwrap();
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            idx
        };
        assert_eq!(order(&kld), order(&mspw));
    }

    #[test]
    fn batch_splitting_does_not_change_scores() {
        let (z, w) = toy(40, 9, 3, 5.0);
        let m = fit(&z, &w, &hyper(5, 2.0)).unwrap();
        let (test, _) = toy(13, 9, 3, 8.0);
        for scorer in Scorer::ALL {
            let whole = m.score_with(scorer, &test, 1024).unwrap();
            let single: Vec<f64> = (0..13)
                .flat_map(|i| m.score_with(scorer, &test.slice_rows(i..i + 1).unwrap(), 1).unwrap())
                .collect();
            assert_eq!(whole, single, "{scorer:?}");
        }
    }

    #[test]
    fn react_without_clip_equals_msp_w() {
        let (z, w) = toy(20, 8, 3, 6.0);
        let mut h = hyper(3, 1.0);
        h.react_percentile = 100.0;
        let m = fit(&z, &w, &h).unwrap();
        // Training max clips nothing in the training set itself.
        assert_eq!(m.score_with(Scorer::React, &z, 64).unwrap(), m.score_with(Scorer::MspW, &z, 64).unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (z, w) = toy(30, 8, 3, 7.0);
        let m = fit(&z, &w, &hyper(3, 1.2)).unwrap();
        m.save(dir.path()).unwrap();
        let back = WeiPerKldModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (z, w) = toy(10, 8, 3, 0.0);
        let mut h = hyper(2, 1.0);
        h.n_bins = 1;
        assert!(matches!(fit(&z, &w, &h), Err(Error::InvalidConfig(_))));
        let (z7, _) = toy(10, 7, 3, 0.0);
        assert!(matches!(fit(&z7, &w, &hyper(2, 1.0)), Err(Error::DimensionMismatch { .. })));
        let m = fit(&z, &w, &hyper(2, 1.0)).unwrap();
        assert!(matches!(m.score(&z7), Err(Error::DimensionMismatch { expected: 8, found: 7, .. })));
        assert!("energy".parse::<Scorer>().is_err());
    }
}
