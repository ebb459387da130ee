//! Perturbed class projections.
//!
//! Every class row `w_j` is repeated `r` times and each copy is pushed off
//! its axis by a Gaussian direction rescaled to `delta * |w_j|`:
//!
//! ```text
//! w~_{i,j} = w_j + delta * |w_j| * eta_{i,j} / |eta_{i,j}|
//! ```
//!
//! Rows are stored block-major: row `i * C + j` holds repeat `i`, class `j`.
//! For large K the noise is nearly orthogonal to `w_j`, so the bundle forms a
//! cone of half-angle close to `atan(delta)` around each class axis.

use std::ops::Range;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, Matrix, WeightMatrix};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{self, domain};

/// Default cap for materialized perturbed latents and weights.
pub const DEFAULT_MEMORY_BUDGET: u64 = 2 << 30;

/// How noise vectors are shared between the rows of one repeat block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSharing {
    /// An independent draw for every (repeat, class) pair.
    #[default]
    PerRow,
    /// One draw per repeat, reused (rescaled) for every class in the block.
    PerRepeat,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbationConfig {
    pub repeats: usize,
    pub delta: f64,
    pub seed: u64,
    pub sharing: NoiseSharing,
    pub memory_budget: u64,
}

impl PerturbationConfig {
    pub fn new(repeats: usize, delta: f64, seed: u64) -> Self {
        Self {
            repeats,
            delta,
            seed,
            sharing: NoiseSharing::PerRow,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("r must be >= 1".into()));
        }
        if !self.delta.is_finite() || self.delta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "delta must be finite and >= 0, got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// The stacked (r·C)×K perturbed weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedWeights {
    repeats: usize,
    classes: usize,
    delta: f64,
    source_seed: u64,
    rows: Matrix,
    memory_budget: u64,
}

impl PerturbedWeights {
    pub fn repeats(&self) -> usize {
        self.repeats
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n_features(&self) -> usize {
        self.rows.cols()
    }

    /// r·C, the width of the perturbed logit space.
    pub fn width(&self) -> usize {
        self.rows.rows()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn source_seed(&self) -> u64 {
        self.source_seed
    }

    pub fn matrix(&self) -> &Matrix {
        &self.rows
    }

    /// Row for repeat `i` (0-based) and class `j`.
    pub fn row(&self, i: usize, j: usize) -> &[f32] {
        self.rows.row(i * self.classes + j)
    }

    pub fn memory_budget(&self) -> u64 {
        self.memory_budget
    }

    pub fn set_memory_budget(&mut self, bytes: u64) {
        self.memory_budget = bytes;
    }

    /// Rebuilds the bundle from a previously dumped matrix.
    pub fn from_parts(rows: Matrix, repeats: usize, delta: f64, source_seed: u64) -> Result<Self> {
        if repeats == 0 || !rows.rows().is_multiple_of(repeats) {
            return Err(Error::DimensionMismatch {
                context: "perturbed rows vs repeats",
                expected: repeats,
                found: rows.rows(),
            });
        }
        Ok(Self {
            repeats,
            classes: rows.rows() / repeats,
            delta,
            source_seed,
            rows,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        })
    }
}

fn gaussian(rng: &mut impl rand::Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

pub fn build_perturbed_weights(w: &WeightMatrix, cfg: &PerturbationConfig) -> Result<PerturbedWeights> {
    cfg.validate()?;
    let (c, k, r) = (w.n_classes(), w.n_features(), cfg.repeats);
    let needed = (r as u64)
        .saturating_mul(c as u64)
        .saturating_mul(k as u64)
        .saturating_mul(4);
    if needed > cfg.memory_budget {
        return Err(Error::MemoryBudget {
            needed,
            budget: cfg.memory_budget,
        });
    }
    let norms: Vec<f64> = (0..c).map(|j| norm(w.row(j).iter().map(|&x| x as f64))).collect();
    if let Some(j) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroNormRow(j));
    }

    let rows = parallel::map_indexed(r * c, |idx| {
        let (i, j) = (idx / c, idx % c);
        let src = w.row(j);
        if cfg.delta == 0.0 {
            return src.to_vec();
        }
        let stream = match cfg.sharing {
            NoiseSharing::PerRow => idx as u64,
            NoiseSharing::PerRepeat => i as u64,
        };
        let eta = gaussian(&mut rng::stream(cfg.seed, domain::PERTURBATION, stream), k);
        let scale = cfg.delta * norms[j] / norm(eta.iter().copied());
        src.iter()
            .zip(&eta)
            .map(|(&x, &e)| (x as f64 + scale * e) as f32)
            .collect::<Vec<f32>>()
    });
    let data: Vec<f32> = rows.concat();
    Ok(PerturbedWeights {
        repeats: r,
        classes: c,
        delta: cfg.delta,
        source_seed: cfg.seed,
        rows: Matrix::new(r * c, k, data)?,
        memory_budget: cfg.memory_budget,
    })
}

/// Dot product with a fixed 8-lane accumulation order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f32 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Projects one sample into the perturbed logit space, writing r·C values to `out`.
pub fn project_sample(z: &[f32], pw: &PerturbedWeights, bias: Option<&[f32]>, out: &mut [f32]) {
    let c = pw.classes;
    for (col, (o, w)) in out.iter_mut().zip(pw.rows.iter_rows()).enumerate() {
        *o = dot(w, z) + bias.map_or(0.0, |b| b[col % c]);
    }
}

fn check_projection(z: &FeatureMatrix, pw: &PerturbedWeights, bias: Option<&[f32]>) -> Result<()> {
    z.expect_features(pw.n_features(), "feature dimension vs perturbed weights")?;
    if let Some(b) = bias {
        if b.len() != pw.classes {
            return Err(Error::DimensionMismatch {
                context: "bias length vs number of classes",
                expected: pw.classes,
                found: b.len(),
            });
        }
    }
    Ok(())
}

/// Projects a sample range; the result is `range.len() × (r·C)`.
pub fn project_rows(
    z: &FeatureMatrix,
    range: Range<usize>,
    pw: &PerturbedWeights,
    bias: Option<&[f32]>,
) -> Result<Matrix> {
    check_projection(z, pw, bias)?;
    if range.is_empty() || range.end > z.n_samples() {
        return Err(Error::InvalidConfig(format!(
            "sample range {range:?} outside 0..{}",
            z.n_samples()
        )));
    }
    let width = pw.width();
    let needed = (range.len() as u64) * (width as u64) * 4;
    if needed > pw.memory_budget {
        return Err(Error::MemoryBudget {
            needed,
            budget: pw.memory_budget,
        });
    }
    let mut out = vec![0f32; range.len() * width];
    let start = range.start;
    parallel::for_each_chunk_mut(&mut out, width, |n, row| {
        project_sample(z.row(start + n), pw, bias, row);
    });
    Matrix::new(range.len(), width, out)
}

/// Projects every sample: `out[n, i*C + j] = w~_{i,j} · z_n + bias_j`.
pub fn project(z: &FeatureMatrix, pw: &PerturbedWeights, bias: Option<&[f32]>) -> Result<Matrix> {
    project_rows(z, 0..z.n_samples(), pw, bias)
}

/// Consecutive sample ranges of at most `batch` rows.
pub fn batch_ranges(n: usize, batch: usize) -> impl Iterator<Item = Range<usize>> {
    let batch = batch.max(1);
    (0..n.div_ceil(batch)).map(move |b| b * batch..((b + 1) * batch).min(n))
}
