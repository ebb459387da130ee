//! Exhaustive hyperparameter grid search.
//!
//! Perturbed weights are built once per `(r, delta)` and every sample's raw
//! bin counts are taken once per `n_bins`. Kernel sizes only touch those
//! cached counts and the lambdas only reweight cached divergences, so the
//! inner four loops never re-project anything.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, OodKind, OodSet, WeightMatrix};
use crate::density::{bin_counts, fingerprint_divergence, MeanDensity, ValueRange, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::eval::{auroc, fpr95};
use crate::kld::{combine, matrix_range, perturbed_range, summed_counts, KldHyperparams, SampleTerms};
use crate::parallel;
use crate::perturb::{batch_ranges, build_perturbed_weights, project_rows, NoiseSharing};
use crate::scores::msp_w;

/// Which validation OOD sets the selection criterion averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    Near,
    All,
}

fn default_react_percentile() -> f64 {
    90.0
}

/// Missing JSON fields take the standard ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridRanges {
    pub r: Vec<usize>,
    pub delta: Vec<f64>,
    pub n_bins: Vec<usize>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub eps: f64,
    pub seed: u64,
    pub objective: Objective,
    pub react_percentile: f64,
    pub noise_sharing: NoiseSharing,
}

impl Default for GridRanges {
    fn default() -> Self {
        Self::standard()
    }
}

impl GridRanges {
    /// The standard search ranges (r fixed at 100).
    pub fn standard() -> Self {
        Self {
            r: vec![100],
            delta: vec![1.8, 2.0, 2.2, 2.4],
            n_bins: vec![60, 80, 100],
            lambda1: vec![0.1, 1.0, 2.5, 4.0],
            lambda2: vec![0.1, 0.25, 1.0, 2.5, 5.0],
            s1: vec![4, 8, 12, 20, 40],
            s2: vec![15, 25, 40],
            eps: DEFAULT_EPS,
            seed: 0,
            objective: Objective::Near,
            react_percentile: default_react_percentile(),
            noise_sharing: NoiseSharing::PerRow,
        }
    }

    /// Number of configurations in the Cartesian product.
    pub fn len(&self) -> usize {
        self.r.len()
            * self.delta.len()
            * self.n_bins.len()
            * self.lambda1.len()
            * self.lambda2.len()
            * self.s1.len()
            * self.s2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[allow(clippy::too_many_arguments)]
    fn hyper(&self, r: usize, delta: f64, n_bins: usize, l1: f64, l2: f64, s1: usize, s2: usize) -> KldHyperparams {
        KldHyperparams {
            r,
            delta,
            n_bins,
            lambda1: l1,
            lambda2: l2,
            s1,
            s2,
            eps: self.eps,
            seed: self.seed,
            react_percentile: self.react_percentile,
            noise_sharing: self.noise_sharing,
        }
    }

    /// Every configuration, in lexicographic order of the ranges as listed.
    pub fn configurations(&self) -> Vec<KldHyperparams> {
        let mut out = Vec::with_capacity(self.len());
        for &r in &self.r {
            for &delta in &self.delta {
                for &nb in &self.n_bins {
                    for &l1 in &self.lambda1 {
                        for &l2 in &self.lambda2 {
                            for &s1 in &self.s1 {
                                for &s2 in &self.s2 {
                                    out.push(self.hyper(r, delta, nb, l1, l2, s1, s2));
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("r", self.r.len()),
            ("delta", self.delta.len()),
            ("n_bins", self.n_bins.len()),
            ("lambda1", self.lambda1.len()),
            ("lambda2", self.lambda2.len()),
            ("s1", self.s1.len()),
            ("s2", self.s2.len()),
        ];
        if let Some((name, _)) = lists.iter().find(|(_, n)| *n == 0) {
            return Err(Error::InvalidConfig(format!("range for {name} is empty")));
        }
        // Each value must be individually valid; probe with the first of the others.
        for &r in &self.r {
            for &delta in &self.delta {
                for &nb in &self.n_bins {
                    self.hyper(r, delta, nb, self.lambda1[0], self.lambda2[0], self.s1[0], self.s2[0])
                        .validate()?;
                }
            }
        }
        for &l1 in &self.lambda1 {
            for &l2 in &self.lambda2 {
                self.hyper(self.r[0], self.delta[0], self.n_bins[0], l1, l2, self.s1[0], self.s2[0])
                    .validate()?;
            }
        }
        for &s1 in &self.s1 {
            for &s2 in &self.s2 {
                self.hyper(self.r[0], self.delta[0], self.n_bins[0], self.lambda1[0], self.lambda2[0], s1, s2)
                    .validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeaderboardEntry {
    pub hyper: KldHyperparams,
    pub val_auroc: f64,
    pub val_fpr95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub best_index: usize,
    pub leaderboard: Vec<LeaderboardEntry>,
}

impl TuneResult {
    pub fn best(&self) -> &LeaderboardEntry {
        &self.leaderboard[self.best_index]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["r", "delta", "n_bins", "lambda1", "lambda2", "s1", "s2", "val_auroc", "val_fpr95"])?;
        for e in &self.leaderboard {
            let h = &e.hyper;
            out.write_record([
                h.r.to_string(),
                h.delta.to_string(),
                h.n_bins.to_string(),
                h.lambda1.to_string(),
                h.lambda2.to_string(),
                h.s1.to_string(),
                h.s2.to_string(),
                e.val_auroc.to_string(),
                e.val_fpr95.to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Objective value of a set of validation scores: mean AUROC and FPR95 over
/// the OOD sets the objective selects.
pub fn validation_metrics(
    id_scores: &[f64],
    ood_scores: &[(OodKind, Vec<f64>)],
    objective: Objective,
) -> Result<(f64, f64)> {
    let chosen: Vec<&Vec<f64>> = ood_scores
        .iter()
        .filter(|(k, _)| objective == Objective::All || *k == OodKind::Near)
        .map(|(_, s)| s)
        .collect();
    if chosen.is_empty() {
        return Err(Error::MissingData("validation objective selects no OOD sets".into()));
    }
    let (mut a, mut f) = (0.0, 0.0);
    for s in &chosen {
        a += auroc(id_scores, s)?;
        f += fpr95(id_scores, s)?;
    }
    let n = chosen.len() as f64;
    Ok((a / n, f / n))
}

/// Raw per-sample statistics for one `(r, delta)` cell.
struct CachedSample {
    pen: Vec<Vec<u64>>,
    pert: Vec<Vec<u64>>,
    msp_w: f64,
}

pub fn grid_search(
    train: &FeatureMatrix,
    val_id: &FeatureMatrix,
    val_ood: &[OodSet],
    head: &WeightMatrix,
    ranges: &GridRanges,
    batch_size: usize,
) -> Result<TuneResult> {
    ranges.validate()?;
    let k = head.n_features();
    train.expect_features(k, "training features vs classifier head")?;
    val_id.expect_features(k, "validation features vs classifier head")?;
    for s in val_ood {
        s.features.expect_features(k, "validation OOD features vs classifier head")?;
    }
    if val_ood.is_empty() {
        return Err(Error::MissingData("grid search needs at least one validation OOD set".into()));
    }
    if ranges.objective == Objective::Near && !val_ood.iter().any(|s| s.kind == OodKind::Near) {
        return Err(Error::MissingData("objective is near but no near validation set given".into()));
    }

    // Validation samples in one list: ID first, then each OOD set.
    let mut val_sets: Vec<&FeatureMatrix> = vec![val_id];
    val_sets.extend(val_ood.iter().map(|s| &s.features));
    let mut offsets = vec![0];
    for m in &val_sets {
        offsets.push(offsets.last().unwrap() + m.n_samples());
    }

    let pen_range = matrix_range(train.matrix());
    let pen_bins: Vec<_> = ranges
        .n_bins
        .iter()
        .map(|&nb| pen_range.to_bins(nb))
        .collect::<Result<_>>()?;
    let pen_train_counts: Vec<Vec<u64>> = pen_bins.iter().map(|b| summed_counts(train.matrix(), b)).collect();

    let mut leaderboard = Vec::with_capacity(ranges.len());
    for &r in &ranges.r {
        for &delta in &ranges.delta {
            let base = ranges.hyper(r, delta, ranges.n_bins[0], 0.0, 0.0, 1, 1);
            let pw = build_perturbed_weights(head, &base.perturbation())?;
            let bias = head.bias();
            let pert_range: ValueRange = perturbed_range(train, &pw, bias, batch_size)?;
            let pert_bins: Vec<_> = ranges
                .n_bins
                .iter()
                .map(|&nb| pert_range.to_bins(nb))
                .collect::<Result<_>>()?;

            let mut pert_train_counts: Vec<Vec<u64>> = pert_bins.iter().map(|b| vec![0; b.n_bins]).collect();
            for rows in batch_ranges(train.n_samples(), batch_size) {
                let logits = project_rows(train, rows, &pw, Some(bias))?;
                for (acc, bins) in pert_train_counts.iter_mut().zip(&pert_bins) {
                    for (t, x) in acc.iter_mut().zip(summed_counts(&logits, bins)) {
                        *t += x;
                    }
                }
            }

            let mut cache: Vec<CachedSample> = Vec::with_capacity(*offsets.last().unwrap());
            for m in &val_sets {
                for rows in batch_ranges(m.n_samples(), batch_size) {
                    let start = rows.start;
                    let logits = project_rows(m, rows.clone(), &pw, Some(bias))?;
                    let batch = parallel::map_indexed(rows.len(), |n| -> Result<CachedSample> {
                        let z = m.row(start + n);
                        let pl = logits.row(n);
                        Ok(CachedSample {
                            pen: pen_bins.iter().map(|b| bin_counts(z, b)).collect(),
                            pert: pert_bins.iter().map(|b| bin_counts(pl, b)).collect(),
                            msp_w: msp_w(pl, pw.repeats(), pw.classes())?,
                        })
                    });
                    for s in batch {
                        cache.push(s?);
                    }
                }
            }

            for (bi, &nb) in ranges.n_bins.iter().enumerate() {
                let pen_mean = MeanDensity::from_counts(pen_bins[bi], &pen_train_counts[bi], train.n_samples(), ranges.eps)?;
                let pert_mean =
                    MeanDensity::from_counts(pert_bins[bi], &pert_train_counts[bi], train.n_samples(), ranges.eps)?;
                let divergences = |space: fn(&CachedSample) -> &Vec<Vec<u64>>, s: usize, mean: &MeanDensity| {
                    parallel::map_indexed(cache.len(), |n| fingerprint_divergence(&space(&cache[n])[bi], s, ranges.eps, mean))
                        .into_iter()
                        .collect::<Result<Vec<f64>>>()
                };
                let d1: Vec<Vec<f64>> = ranges
                    .s1
                    .iter()
                    .map(|&s| divergences(|c| &c.pen, s, &pen_mean))
                    .collect::<Result<_>>()?;
                let d2: Vec<Vec<f64>> = ranges
                    .s2
                    .iter()
                    .map(|&s| divergences(|c| &c.pert, s, &pert_mean))
                    .collect::<Result<_>>()?;

                let mut inner = Vec::new();
                for (l1, l2) in ranges.lambda1.iter().flat_map(|&a| ranges.lambda2.iter().map(move |&b| (a, b))) {
                    for i1 in 0..ranges.s1.len() {
                        for i2 in 0..ranges.s2.len() {
                            inner.push((l1, l2, i1, i2));
                        }
                    }
                }
                let results = parallel::map_indexed(inner.len(), |c| -> Result<LeaderboardEntry> {
                    let (l1, l2, i1, i2) = inner[c];
                    let scores: Vec<f64> = (0..cache.len())
                        .map(|n| {
                            let t = SampleTerms { d_pen: d1[i1][n], d_pert: d2[i2][n], msp_w: cache[n].msp_w };
                            combine(&t, l1, l2)
                        })
                        .collect();
                    let id = &scores[offsets[0]..offsets[1]];
                    let ood: Vec<(OodKind, Vec<f64>)> = val_ood
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (s.kind, scores[offsets[i + 1]..offsets[i + 2]].to_vec()))
                        .collect();
                    let (val_auroc, val_fpr95) = validation_metrics(id, &ood, ranges.objective)?;
                    Ok(LeaderboardEntry {
                        hyper: ranges.hyper(r, delta, nb, l1, l2, ranges.s1[i1], ranges.s2[i2]),
                        val_auroc,
                        val_fpr95,
                    })
                });
                for e in results {
                    leaderboard.push(e?);
                }
            }
            log::info!("tune: finished r={r} delta={delta} ({} configurations so far)", leaderboard.len());
        }
    }

    let mut best_index = 0;
    for (i, e) in leaderboard.iter().enumerate() {
        if e.val_auroc > leaderboard[best_index].val_auroc {
            best_index = i;
        }
    }
    Ok(TuneResult { best_index, leaderboard })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn tiny_ranges() -> GridRanges {
        GridRanges {
            r: vec![3],
            delta: vec![0.5, 2.0],
            n_bins: vec![8, 12],
            lambda1: vec![0.0, 1.0],
            lambda2: vec![0.0, 2.0],
            s1: vec![1, 3],
            s2: vec![2],
            ..GridRanges::standard()
        }
    }

    fn small_bundle() -> (crate::data::DatasetBundle, WeightMatrix) {
        generate(&SynthConfig { k: 24, c: 3, n_per_class: 15, n_ood: 20, ..Default::default() }).unwrap()
    }

    #[test]
    fn standard_grid_has_3600_points() {
        let g = GridRanges::standard();
        assert_eq!(g.len(), 3600);
        assert_eq!(g.configurations().len(), 3600);
    }

    #[test]
    fn enumeration_order_is_lexicographic() {
        let cfgs = tiny_ranges().configurations();
        assert_eq!(cfgs.len(), 32);
        assert_eq!((cfgs[0].delta, cfgs[0].n_bins, cfgs[0].s1), (0.5, 8, 1));
        assert_eq!(cfgs[1].s1, 3);
        assert_eq!(cfgs[2].lambda2, 2.0);
        assert_eq!(cfgs[16].delta, 2.0);
    }

    #[test]
    fn leaderboard_matches_enumeration_and_best_is_max() {
        let (b, w) = small_bundle();
        let g = tiny_ranges();
        let res = grid_search(&b.id_train, b.id_val.as_ref().unwrap(), &b.ood_sets, &w, &g, 16).unwrap();
        assert_eq!(res.leaderboard.len(), g.len());
        let hypers: Vec<_> = res.leaderboard.iter().map(|e| e.hyper.clone()).collect();
        assert_eq!(hypers, g.configurations());
        let max = res.leaderboard.iter().map(|e| e.val_auroc).fold(f64::MIN, f64::max);
        assert_eq!(res.best().val_auroc, max);
        let first_max = res.leaderboard.iter().position(|e| e.val_auroc == max).unwrap();
        assert_eq!(res.best_index, first_max);
    }

    #[test]
    fn ties_resolve_to_first_configuration() {
        let (b, w) = small_bundle();
        // lambda1 only scales a term that is identical across the two values
        // when the pert divergence is multiplied by zero lambda2... instead use
        // duplicated values, which must score identically.
        let g = GridRanges { lambda1: vec![1.0, 1.0], ..tiny_ranges() };
        let res = grid_search(&b.id_train, b.id_val.as_ref().unwrap(), &b.ood_sets, &w, &g, 16).unwrap();
        let best = res.best_index;
        let best_auroc = res.leaderboard[best].val_auroc;
        assert!(res.leaderboard[..best].iter().all(|e| e.val_auroc < best_auroc));
    }

    #[test]
    fn singleton_grid() {
        let (b, w) = small_bundle();
        let g = GridRanges {
            r: vec![2],
            delta: vec![1.0],
            n_bins: vec![10],
            lambda1: vec![1.0],
            lambda2: vec![1.0],
            s1: vec![2],
            s2: vec![3],
            ..GridRanges::standard()
        };
        let res = grid_search(&b.id_train, b.id_val.as_ref().unwrap(), &b.ood_sets, &w, &g, 16).unwrap();
        assert_eq!(res.leaderboard.len(), 1);
        assert_eq!(res.best_index, 0);
    }

    #[test]
    fn empty_range_rejected() {
        let (b, w) = small_bundle();
        let g = GridRanges { s2: vec![], ..tiny_ranges() };
        let err = grid_search(&b.id_train, b.id_val.as_ref().unwrap(), &b.ood_sets, &w, &g, 16).unwrap_err();
        assert!(err.is_usage(), "{err}");
        assert!(grid_search(&b.id_train, b.id_val.as_ref().unwrap(), &[], &w, &tiny_ranges(), 16).is_err());
    }

    #[test]
    fn deterministic_rerun() {
        let (b, w) = small_bundle();
        let g = tiny_ranges();
        let a = grid_search(&b.id_train, b.id_val.as_ref().unwrap(), &b.ood_sets, &w, &g, 7).unwrap();
        let c = grid_search(&b.id_train, b.id_val.as_ref().unwrap(), &b.ood_sets, &w, &g, 64).unwrap();
        assert_eq!(a, c);
    }
}
