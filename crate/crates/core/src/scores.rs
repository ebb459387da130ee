//! Confidence scorers on logit vectors. Every score is "ID-ness": higher
//! means more in-distribution.

use serde::{Deserialize, Serialize};

use crate::data::FeatureMatrix;
use crate::error::{Error, Result};

/// Softmax with max-subtraction.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Maximum softmax probability, in `[1/C, 1]`.
pub fn msp(logits: &[f32]) -> f64 {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    // The arg-max term contributes exp(0) = 1 to the partition sum.
    let s: f64 = logits.iter().map(|&x| (x as f64 - m).exp()).sum();
    1.0 / s
}

/// Mean MSP over the `r` consecutive blocks of `C` perturbed logits.
pub fn msp_w(pert_logits: &[f32], repeats: usize, classes: usize) -> Result<f64> {
    if repeats == 0 || classes == 0 || pert_logits.len() != repeats * classes {
        return Err(Error::DimensionMismatch {
            context: "perturbed logits length vs r*C",
            expected: repeats * classes,
            found: pert_logits.len(),
        });
    }
    let total: f64 = pert_logits.chunks_exact(classes).map(msp).sum();
    Ok(total / repeats as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReactThreshold {
    pub clip: f32,
    pub percentile: f64,
}

impl ReactThreshold {
    /// A threshold that never clips.
    pub fn disabled() -> Self {
        Self {
            clip: f32::INFINITY,
            percentile: 100.0,
        }
    }
}

/// Nearest-rank percentile over every pooled training activation:
/// the `ceil(p/100 * M)`-th smallest of the `M = N*K` values.
pub fn fit_react_threshold(train: &FeatureMatrix, percentile: f64) -> Result<ReactThreshold> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::InvalidConfig(format!(
            "react percentile must be in (0, 100], got {percentile}"
        )));
    }
    let mut pool = train.matrix().as_slice().to_vec();
    if pool.is_empty() {
        return Err(Error::EmptyInput("react threshold needs training activations"));
    }
    let m = pool.len();
    let rank = ((percentile * m as f64 / 100.0).ceil() as usize).clamp(1, m);
    let (_, &mut clip, _) = pool.select_nth_unstable_by(rank - 1, f32::total_cmp);
    Ok(ReactThreshold { clip, percentile })
}

/// Elementwise `min(z_k, c)`.
pub fn react_clip(z: &[f32], thr: &ReactThreshold) -> Vec<f32> {
    z.iter().map(|&v| v.min(thr.clip)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] < 1e-300);
        let p = softmax(&[1.0, 0.0, 0.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 3.0)).abs() < 1e-15);
        assert!((p[0] - 0.4754).abs() < 1e-4);
        for &x in &p[1..] {
            assert!((x - 1.0 / (e + 3.0)).abs() < 1e-15);
            assert!((x - 0.1749).abs() < 1e-4);
        }
    }

    #[test]
    fn msp_cases() {
        assert_eq!(msp(&[2.0; 4]), 0.25);
        assert!((msp(&[3f32.ln(), 0.0]) - 0.75).abs() < 1e-7);
        assert_eq!(msp(&[1.0, 5.0, -2.0]), msp(&[-2.0, 1.0, 5.0]));
    }

    #[test]
    fn msp_w_cases() {
        assert_eq!(msp_w(&[1.0, 2.0, 0.5], 1, 3).unwrap(), msp(&[1.0, 2.0, 0.5]));
        let v = msp_w(&[0.0, 0.0, 3f32.ln(), 0.0], 2, 2).unwrap();
        assert!((v - 0.625).abs() < 1e-7);
        let block = [0.3f32, -1.0, 2.5];
        let rep: Vec<f32> = block.iter().cycle().take(15).copied().collect();
        assert_eq!(msp_w(&rep, 5, 3).unwrap(), msp(&block));
        assert!(msp_w(&[1.0, 2.0, 3.0], 2, 2).is_err());
    }

    #[test]
    fn react_threshold_cases() {
        let constant = FeatureMatrix::new(3, 4, vec![7.0; 12]).unwrap();
        assert_eq!(fit_react_threshold(&constant, 90.0).unwrap().clip, 7.0);

        let ramp = FeatureMatrix::new(10, 10, (1..=100).rev().map(|v| v as f32).collect()).unwrap();
        assert_eq!(fit_react_threshold(&ramp, 90.0).unwrap().clip, 90.0);
        assert_eq!(fit_react_threshold(&ramp, 100.0).unwrap().clip, 100.0);
        assert_eq!(fit_react_threshold(&ramp, 0.5).unwrap().clip, 1.0);

        assert!(fit_react_threshold(&ramp, 0.0).is_err());
        assert!(fit_react_threshold(&ramp, 100.5).is_err());
    }

    #[test]
    fn react_clip_cases() {
        let thr = ReactThreshold { clip: 3.0, percentile: 90.0 };
        assert_eq!(react_clip(&[5.0, -1.0], &thr), vec![3.0, -1.0]);
        assert_eq!(react_clip(&[1.0, 2.0], &thr), vec![1.0, 2.0]);
        assert_eq!(react_clip(&[1e30, 2.0], &ReactThreshold::disabled()), vec![1e30, 2.0]);
    }

    /// Nearest-rank oracle by full sort.
    fn nearest_rank(values: &[f32], p: f64) -> f32 {
        let mut v = values.to_vec();
        v.sort_by(f32::total_cmp);
        let rank = (p * v.len() as f64 / 100.0).ceil() as usize;
        v[rank.max(1) - 1]
    }

    proptest! {
        #[test]
        fn msp_shift_and_permutation_invariant(
            v in prop::collection::vec(-20f32..20.0, 2..12),
            shift in -50f32..50.0,
            rot in 0usize..12,
        ) {
            let base = msp(&v);
            let shifted: Vec<f32> = v.iter().map(|x| x + shift).collect();
            let mut rotated = v.clone();
            rotated.rotate_left(rot % v.len());
            prop_assert!((msp(&shifted) - base).abs() < 1e-5);
            prop_assert!((msp(&rotated) - base).abs() < 1e-12);
            let c = v.len() as f64;
            prop_assert!(base >= 1.0 / c - 1e-12 && base <= 1.0 + 1e-12);
        }

        #[test]
        fn softmax_normalized(v in prop::collection::vec(-700f64..700.0, 1..20)) {
            let p = softmax(&v);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn msp_w_bounds(v in prop::collection::vec(-10f32..10.0, 12), r in prop::sample::select(vec![1usize, 2, 3, 4, 6])) {
            let c = 12 / r;
            let s = msp_w(&v, r, c).unwrap();
            prop_assert!(s >= 1.0 / c as f64 - 1e-12 && s <= 1.0 + 1e-12);
        }

        #[test]
        fn clip_idempotent(z in prop::collection::vec(-5f32..5.0, 1..30), c in -5f32..5.0) {
            let thr = ReactThreshold { clip: c, percentile: 50.0 };
            let once = react_clip(&z, &thr);
            prop_assert_eq!(react_clip(&once, &thr), once);
        }

        #[test]
        fn threshold_matches_sort_oracle(v in prop::collection::vec(-100f32..100.0, 1..200), p in 0.01f64..100.0) {
            let fm = FeatureMatrix::new(1, v.len(), v.clone()).unwrap();
            prop_assert_eq!(fit_react_threshold(&fm, p).unwrap().clip, nearest_rank(&v, p));
        }
    }
}
