//! AUROC, FPR at a fixed TPR, per-benchmark reports, and the relative score
//! across postprocessors. ID is the positive class and higher scores mean
//! "more in-distribution".

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::OodKind;
use crate::error::{Error, Result};
use crate::parallel;

fn sorted(scores: &[f64], what: &'static str) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput(what));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::MissingData(format!("{what}: non-finite score at index {i}")));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Mann–Whitney AUROC: `(#{id > ood} + 0.5 #{id == ood}) / (|id| |ood|)`.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let id = sorted(id_scores, "auroc needs ID scores")?;
    let ood = sorted(ood_scores, "auroc needs OOD scores")?;
    // Twice the U statistic, accumulated exactly in integers.
    let (mut twice_u, mut j) = (0u128, 0usize);
    let mut i = 0;
    while i < id.len() {
        let v = id[i];
        let run = id[i..].iter().take_while(|&&x| x == v).count();
        while j < ood.len() && ood[j] < v {
            j += 1;
        }
        let ties = ood[j..].iter().take_while(|&&x| x == v).count();
        twice_u += run as u128 * (2 * j + ties) as u128;
        i += run;
    }
    Ok(twice_u as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64)
}

/// FPR at the largest observed ID threshold `t` whose TPR `|{id >= t}| / |id|`
/// reaches `tpr_target`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::InvalidConfig(format!("tpr target must be in (0, 1], got {tpr_target}")));
    }
    let id = sorted(id_scores, "fpr needs ID scores")?;
    let ood = sorted(ood_scores, "fpr needs OOD scores")?;
    let n = id.len() as f64;
    // Walk distinct ID values from the top; the first that reaches the target wins.
    let mut idx = id.len();
    let threshold = loop {
        let v = id[idx - 1];
        let first = id.partition_point(|&x| x < v);
        if (id.len() - first) as f64 / n >= tpr_target || first == 0 {
            break v;
        }
        idx = first;
    };
    let fp = ood.len() - ood.partition_point(|&x| x < threshold);
    Ok(fp as f64 / ood.len() as f64)
}

pub fn fpr95(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    fpr_at_tpr(id_scores, ood_scores, 0.95)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetMetrics {
    pub name: String,
    pub kind: OodKind,
    pub auroc: f64,
    pub fpr95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sets: Vec<SetMetrics>,
    pub near_auroc: Option<f64>,
    pub near_fpr95: Option<f64>,
    pub far_auroc: Option<f64>,
    pub far_fpr95: Option<f64>,
}

/// Scores of one OOD set, ready for evaluation.
#[derive(Clone, Debug)]
pub struct ScoredSet<'a> {
    pub name: &'a str,
    pub kind: OodKind,
    pub scores: &'a [f64],
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn evaluate(id_scores: &[f64], sets: &[ScoredSet<'_>]) -> Result<EvalReport> {
    if sets.is_empty() {
        return Err(Error::MissingData("no OOD score sets to evaluate".into()));
    }
    let metrics = parallel::map_indexed(sets.len(), |i| -> Result<SetMetrics> {
        let s = &sets[i];
        Ok(SetMetrics {
            name: s.name.to_owned(),
            kind: s.kind,
            auroc: auroc(id_scores, s.scores)?,
            fpr95: fpr95(id_scores, s.scores)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let agg = |kind: OodKind, f: fn(&SetMetrics) -> f64| mean(metrics.iter().filter(|m| m.kind == kind).map(f));
    Ok(EvalReport {
        near_auroc: agg(OodKind::Near, |m| m.auroc),
        near_fpr95: agg(OodKind::Near, |m| m.fpr95),
        far_auroc: agg(OodKind::Far, |m| m.auroc),
        far_fpr95: agg(OodKind::Far, |m| m.fpr95),
        sets: metrics,
    })
}

impl EvalReport {
    /// CSV with header `dataset,tag,auroc,fpr95`, then `NEAR` and `FAR`
    /// aggregate rows for each tag that has at least one set.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["dataset", "tag", "auroc", "fpr95"])?;
        for s in &self.sets {
            out.write_record([s.name.as_str(), s.kind.as_str(), &s.auroc.to_string(), &s.fpr95.to_string()])?;
        }
        for (label, a, f) in [
            ("NEAR", self.near_auroc, self.near_fpr95),
            ("FAR", self.far_auroc, self.far_fpr95),
        ] {
            if let (Some(a), Some(f)) = (a, f) {
                out.write_record([label, "-", &a.to_string(), &f.to_string()])?;
            }
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Postprocessor × benchmark AUROC table with per-benchmark weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AurocTable {
    pub benchmarks: Vec<(String, f64)>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl AurocTable {
    /// The four OpenOOD columns: CIFAR10 and CIFAR100 weigh 1/3 each, the two
    /// ImageNet backbones share the last third.
    pub fn openood(rows: Vec<(String, [Option<f64>; 4])>) -> Self {
        let third = 1.0 / 3.0;
        Self {
            benchmarks: vec![
                ("cifar10".into(), third),
                ("cifar100".into(), third),
                ("imagenet_resnet50".into(), third / 2.0),
                ("imagenet_vit_b16".into(), third / 2.0),
            ],
            rows: rows.into_iter().map(|(n, v)| (n, v.to_vec())).collect(),
        }
    }
}

/// Relative score per postprocessor: the weighted sum over benchmarks of
/// `AUROC_D(P) / max_P' AUROC_D(P')`.
pub fn s_rel(table: &AurocTable) -> Result<Vec<(String, f64)>> {
    if table.rows.is_empty() || table.benchmarks.is_empty() {
        return Err(Error::EmptyInput("relative score needs a non-empty table"));
    }
    for (name, cells) in &table.rows {
        if cells.len() != table.benchmarks.len() {
            return Err(Error::DimensionMismatch {
                context: "AUROC row length vs benchmarks",
                expected: table.benchmarks.len(),
                found: cells.len(),
            });
        }
        if let Some(d) = cells.iter().position(Option::is_none) {
            return Err(Error::MissingCell {
                row: name.clone(),
                column: table.benchmarks[d].0.clone(),
            });
        }
    }
    let best: Vec<f64> = (0..table.benchmarks.len())
        .map(|d| table.rows.iter().map(|(_, c)| c[d].unwrap()).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(table
        .rows
        .iter()
        .map(|(name, cells)| {
            let s = table
                .benchmarks
                .iter()
                .zip(cells)
                .zip(&best)
                .map(|(((_, w), a), m)| w * a.unwrap() / m)
                .sum();
            (name.clone(), s)
        })
        .collect())
}
