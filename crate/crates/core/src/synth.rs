//! Synthetic conical benchmark.
//!
//! Class `j` lives around `class_sep * u_j` for orthonormal directions `u_j`,
//! which double as the classifier rows. OOD samples sit on rays
//! `t * (u_j + cone_spread * g_perp)` with `t` below `class_sep`, where
//! `g_perp` is a Gaussian vector with its `u_j` component removed: mass near
//! the origin that widens as it reaches toward each class cluster.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, FeatureMatrix, Matrix, OodKind, OodSet, WeightMatrix};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::{self, domain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Feature dimension K.
    pub k: usize,
    /// Number of classes C.
    pub c: usize,
    /// Samples per class in each of id_train, id_val and id_test.
    pub n_per_class: usize,
    /// Samples in each OOD set.
    pub n_ood: usize,
    pub class_sep: f64,
    pub cone_spread: f64,
    /// Per-coordinate std of the Gaussian tangent, before `cone_spread`.
    pub tangent_sigma: f64,
    pub noise_sigma: f64,
    /// Fixes the class directions and, with `sample_seed`, the samples.
    pub seed: u64,
    /// Redraws every sample while keeping the class directions, e.g. for a
    /// validation bundle that shares the head of the test bundle.
    pub sample_seed: u16,
    /// Near-OOD rays reach `t < near_reach * class_sep`.
    pub near_reach: f64,
    /// Far-OOD rays reach `t < far_reach * class_sep`.
    pub far_reach: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            k: 512,
            c: 10,
            n_per_class: 100,
            n_ood: 1000,
            class_sep: 6.0,
            cone_spread: 0.5,
            tangent_sigma: 0.5,
            noise_sigma: 1.0,
            seed: 0,
            sample_seed: 0,
            near_reach: 1.0,
            far_reach: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.k < 2 || self.c < 2 {
            return bad(format!("need K >= 2 and C >= 2, got K={} C={}", self.k, self.c));
        }
        if self.c > self.k {
            return bad(format!("cannot orthogonalize C={} directions in K={} dimensions", self.c, self.k));
        }
        if self.n_per_class == 0 || self.n_ood == 0 {
            return bad("sample counts must be positive".into());
        }
        if !(self.class_sep.is_finite() && self.class_sep > 0.0) {
            return bad(format!("class_sep must be > 0, got {}", self.class_sep));
        }
        for (name, v) in [
            ("cone_spread", self.cone_spread),
            ("tangent_sigma", self.tangent_sigma),
            ("noise_sigma", self.noise_sigma),
            ("near_reach", self.near_reach),
            ("far_reach", self.far_reach),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormal class directions by modified Gram–Schmidt on Gaussian draws.
fn directions(cfg: &SynthConfig) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cfg.c);
    let mut attempt = 0u64;
    while basis.len() < cfg.c {
        let mut v = gaussian(&mut rng::stream(cfg.seed, domain::SYNTH_DIRECTIONS, attempt), cfg.k);
        attempt += 1;
        for u in &basis {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    basis
}

#[derive(Clone, Copy)]
enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
    Near = 3,
    Far = 4,
}

fn sample_stream(cfg: &SynthConfig, split: Split, n: usize) -> rand_chacha::ChaCha8Rng {
    let index = ((cfg.sample_seed as u64) << 48) | ((split as u64) << 40) | n as u64;
    rng::stream(cfg.seed, domain::SYNTH_SAMPLES, index)
}

fn to_matrix(rows: Vec<Vec<f32>>, k: usize) -> Result<FeatureMatrix> {
    FeatureMatrix::new(rows.len(), k, rows.concat())
}

fn id_split(cfg: &SynthConfig, dirs: &[Vec<f64>], split: Split) -> Result<FeatureMatrix> {
    let rows = parallel::map_indexed(cfg.c * cfg.n_per_class, |n| {
        let u = &dirs[n / cfg.n_per_class];
        let g = gaussian(&mut sample_stream(cfg, split, n), cfg.k);
        u.iter()
            .zip(&g)
            .map(|(&ui, &gi)| (cfg.class_sep * ui + cfg.noise_sigma * gi) as f32)
            .collect::<Vec<f32>>()
    });
    to_matrix(rows, cfg.k)
}

fn ood_split(cfg: &SynthConfig, dirs: &[Vec<f64>], split: Split, reach: f64) -> Result<FeatureMatrix> {
    let rows = parallel::map_indexed(cfg.n_ood, |n| {
        let mut rng = sample_stream(cfg, split, n);
        let u = &dirs[rng.random_range(0..cfg.c)];
        let t = rng.random::<f64>() * reach * cfg.class_sep;
        let mut g = gaussian(&mut rng, cfg.k);
        for d in dirs {
            let p = dot(&g, d);
            g.iter_mut().zip(d).for_each(|(x, y)| *x -= p * y);
        }
        u.iter()
            .zip(&g)
            .map(|(&ui, &gi)| (t * (ui + cfg.cone_spread * cfg.tangent_sigma * gi)) as f32)
            .collect::<Vec<f32>>()
    });
    to_matrix(rows, cfg.k)
}

/// Generates the bundle (train/val/test ID splits, one near and one far OOD
/// set) and the classifier head whose rows are the class directions.
pub fn generate(cfg: &SynthConfig) -> Result<(DatasetBundle, WeightMatrix)> {
    cfg.validate()?;
    let dirs = directions(cfg);
    let head = WeightMatrix::new(Matrix::new(
        cfg.c,
        cfg.k,
        dirs.iter().flatten().map(|&x| x as f32).collect(),
    )?)?;
    let bundle = DatasetBundle::new(
        id_split(cfg, &dirs, Split::Train)?,
        Some(id_split(cfg, &dirs, Split::Val)?),
        id_split(cfg, &dirs, Split::Test)?,
        vec![
            OodSet {
                name: "cone".into(),
                kind: OodKind::Near,
                features: ood_split(cfg, &dirs, Split::Near, cfg.near_reach)?,
            },
            OodSet {
                name: "origin".into(),
                kind: OodKind::Far,
                features: ood_split(cfg, &dirs, Split::Far, cfg.far_reach)?,
            },
        ],
    )?;
    Ok((bundle, head))
}
