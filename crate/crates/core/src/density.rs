//! Histogram fingerprints: per-sample activation histograms, uniform-kernel
//! smoothing with an epsilon floor, the mean training density, and the
//! symmetric KL divergence between them.
//!
//! All quantities are bin probabilities. Dividing by the bin length gives the
//! usual piecewise-constant density, but that factor cancels inside the KL
//! divergence, so it is never applied on the scoring path.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default epsilon floor added to every bin before renormalizing.
pub const DEFAULT_EPS: f64 = 0.01;

/// `n_bins` equal-width bins over `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_bins: usize,
}

impl BinSpec {
    pub fn new(lo: f64, hi: f64, n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::InvalidConfig(format!("n_bins must be >= 2, got {n_bins}")));
        }
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(Error::InvalidConfig(format!("bin range needs hi > lo, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi, n_bins })
    }

    /// Range `[min, max]`, widened to `[v - 0.5, v + 0.5]` when all values coincide.
    pub fn from_range(min: f64, max: f64, n_bins: usize) -> Result<Self> {
        if min == max {
            Self::new(min - 0.5, min + 0.5, n_bins)
        } else {
            Self::new(min, max, n_bins)
        }
    }

    /// The bin length `l_b`.
    pub fn bin_len(&self) -> f64 {
        (self.hi - self.lo) / self.n_bins as f64
    }

    /// Left edge of bin `b`; `edge(n_bins)` is `hi`.
    pub fn edge(&self, b: usize) -> f64 {
        if b == self.n_bins {
            self.hi
        } else {
            self.lo + b as f64 * self.bin_len()
        }
    }

    /// Bins are half-open `[edge_b, edge_{b+1})` except the last, which is
    /// closed; out-of-range values clamp into the edge bins.
    #[inline]
    pub fn index(&self, v: f64) -> usize {
        let n = self.n_bins;
        let t = ((v - self.lo) / self.bin_len()).floor();
        let mut b = if t.is_nan() || t < 0.0 {
            0
        } else if t >= n as f64 {
            n - 1
        } else {
            t as usize
        };
        while b > 0 && v < self.edge(b) {
            b -= 1;
        }
        while b + 1 < n && v >= self.edge(b + 1) {
            b += 1;
        }
        b
    }
}

/// Running min/max over a pooled stream of values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl Default for ValueRange {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        }
    }
}

impl ValueRange {
    pub fn of(values: &[f32]) -> Self {
        let mut r = Self::default();
        r.extend(values);
        r
    }

    pub fn extend(&mut self, values: &[f32]) {
        for &v in values {
            let v = v as f64;
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min > self.max
    }

    pub fn to_bins(self, n_bins: usize) -> Result<BinSpec> {
        if self.is_empty() {
            return Err(Error::EmptyInput("no values to fit a bin range"));
        }
        BinSpec::from_range(self.min, self.max, n_bins)
    }
}

/// Histogram range fit on pooled training values.
pub fn fit_bin_spec(train_values: &[f32], n_bins: usize) -> Result<BinSpec> {
    if train_values.is_empty() {
        return Err(Error::EmptyInput("no values to fit a bin range"));
    }
    ValueRange::of(train_values).to_bins(n_bins)
}

/// Adds per-bin counts of `values` into `counts`.
pub fn count_into(values: &[f32], bins: &BinSpec, counts: &mut [u64]) {
    debug_assert_eq!(counts.len(), bins.n_bins);
    for &v in values {
        counts[bins.index(v as f64)] += 1;
    }
}

pub fn bin_counts(values: &[f32], bins: &BinSpec) -> Vec<u64> {
    let mut counts = vec![0; bins.n_bins];
    count_into(values, bins, &mut counts);
    counts
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bins: BinSpec,
    pub probs: Vec<f64>,
}

impl Histogram {
    pub fn from_counts(bins: BinSpec, counts: &[u64]) -> Result<Self> {
        if counts.len() != bins.n_bins {
            return Err(Error::DimensionMismatch {
                context: "histogram counts vs n_bins",
                expected: bins.n_bins,
                found: counts.len(),
            });
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyInput("histogram of zero values"));
        }
        let total = total as f64;
        Ok(Self {
            bins,
            probs: counts.iter().map(|&c| c as f64 / total).collect(),
        })
    }

    /// Piecewise-constant density value of bin `b` (`prob / l_b`).
    pub fn density(&self, b: usize) -> f64 {
        self.probs[b] / self.bins.bin_len()
    }

    /// Adds `eps` to every bin and renormalizes to unit mass.
    pub fn epsilon_floor(&self, eps: f64) -> Self {
        let floored: Vec<f64> = self.probs.iter().map(|p| p + eps).collect();
        let s: f64 = floored.iter().sum();
        Self {
            bins: self.bins,
            probs: floored.into_iter().map(|p| p / s).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["bin_lo", "bin_hi", "prob"])?;
        for (b, p) in self.probs.iter().enumerate() {
            out.write_record([
                self.bins.edge(b).to_string(),
                self.bins.edge(b + 1).to_string(),
                p.to_string(),
            ])?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

pub fn histogram(values: &[f32], bins: &BinSpec) -> Result<Histogram> {
    if values.is_empty() {
        return Err(Error::EmptyInput("histogram of zero values"));
    }
    Histogram::from_counts(*bins, &bin_counts(values, bins))
}

fn check_smoothing(s: usize, eps: f64) -> Result<()> {
    if s == 0 {
        return Err(Error::InvalidConfig("kernel size must be >= 1".into()));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidConfig(format!("eps must be finite and > 0, got {eps}")));
    }
    Ok(())
}

/// Moving average with a zero-padded window of `s` bins.
/// Bin `b` averages `[b - floor((s-1)/2), b + ceil((s-1)/2)]`.
pub fn box_filter(probs: &[f64], s: usize) -> Vec<f64> {
    let n = probs.len() as isize;
    let left = ((s - 1) / 2) as isize;
    let right = (s - 1) as isize - left;
    (0..n)
        .map(|b| {
            let lo = (b - left).max(0);
            let hi = (b + right).min(n - 1);
            let sum: f64 = if lo <= hi {
                probs[lo as usize..=hi as usize].iter().sum()
            } else {
                0.0
            };
            sum / s as f64
        })
        .collect()
}

/// Uniform-kernel smoothing, then epsilon floor and renormalization.
pub fn smooth(h: &Histogram, s: usize, eps: f64) -> Result<Histogram> {
    check_smoothing(s, eps)?;
    Ok(Histogram {
        bins: h.bins,
        probs: box_filter(&h.probs, s),
    }
    .epsilon_floor(eps))
}

/// Mean of the training fingerprints, epsilon-floored (not kernel-smoothed).
#[derive(Clone, Debug, PartialEq)]
pub struct MeanDensity {
    pub hist: Histogram,
    pub n_contributors: usize,
}

impl MeanDensity {
    /// From summed training counts where every sample contributes the same
    /// number of values, so `counts / total` is the mean of the per-sample
    /// histograms.
    pub fn from_counts(bins: BinSpec, counts: &[u64], n_contributors: usize, eps: f64) -> Result<Self> {
        check_smoothing(1, eps)?;
        Ok(Self {
            hist: Histogram::from_counts(bins, counts)?.epsilon_floor(eps),
            n_contributors,
        })
    }
}

fn tree_sum(hists: &[Histogram]) -> Vec<f64> {
    match hists {
        [h] => h.probs.clone(),
        _ => {
            let (l, r) = hists.split_at(hists.len() / 2);
            let mut a = tree_sum(l);
            for (x, y) in a.iter_mut().zip(tree_sum(r)) {
                *x += y;
            }
            a
        }
    }
}

/// Elementwise mean of histograms, summed in a fixed pairwise tree.
pub fn mean_histogram(hists: &[Histogram]) -> Result<Histogram> {
    let first = hists.first().ok_or(Error::EmptyInput("mean of zero histograms"))?;
    if hists.iter().any(|h| h.bins != first.bins || h.probs.len() != first.probs.len()) {
        return Err(Error::BinSpecMismatch);
    }
    let n = hists.len() as f64;
    Ok(Histogram {
        bins: first.bins,
        probs: tree_sum(hists).into_iter().map(|p| p / n).collect(),
    })
}

pub fn mean_density(hists: &[Histogram], eps: f64) -> Result<MeanDensity> {
    check_smoothing(1, eps)?;
    Ok(MeanDensity {
        hist: mean_histogram(hists)?.epsilon_floor(eps),
        n_contributors: hists.len(),
    })
}

/// `KL(p||q) + KL(q||p)` in nats, summed as `(p - q)(ln p - ln q)` per bin.
pub fn sym_kl(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.bins != q.bins || p.probs.len() != q.probs.len() {
        return Err(Error::BinSpecMismatch);
    }
    sym_kl_probs(&p.probs, &q.probs)
}

pub(crate) fn sym_kl_probs(p: &[f64], q: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (b, (&x, &y)) in p.iter().zip(q).enumerate() {
        if x <= 0.0 || y <= 0.0 {
            return Err(Error::ZeroProbability { bin: b });
        }
        total += (x - y) * (x.ln() - y.ln());
    }
    Ok(total)
}

/// Symmetric KL between a sample's smoothed fingerprint (from raw counts) and
/// a training mean.
pub fn fingerprint_divergence(counts: &[u64], s: usize, eps: f64, mean: &MeanDensity) -> Result<f64> {
    let h = Histogram::from_counts(mean.hist.bins, counts)?;
    sym_kl(&smooth(&h, s, eps)?, &mean.hist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist(probs: &[f64], lo: f64, hi: f64) -> Histogram {
        Histogram {
            bins: BinSpec::new(lo, hi, probs.len()).unwrap(),
            probs: probs.to_vec(),
        }
    }

    /// Naive oracle: first bin whose right edge exceeds v, else the last bin.
    fn naive_index(bins: &BinSpec, v: f64) -> usize {
        (0..bins.n_bins)
            .find(|&b| b == bins.n_bins - 1 || v < bins.edge(b + 1))
            .unwrap()
    }

    #[test]
    fn bin_spec_cases() {
        let b = fit_bin_spec(&[0.0, 0.3, 1.0], 2).unwrap();
        assert_eq!((b.lo, b.hi, b.bin_len()), (0.0, 1.0, 0.5));
        let b = fit_bin_spec(&[3.0, 3.0], 4).unwrap();
        assert_eq!((b.lo, b.hi), (2.5, 3.5));
        let b = fit_bin_spec(&[-2.0, 1.0, 6.0], 4).unwrap();
        assert_eq!(b.bin_len(), 2.0);
        assert!(fit_bin_spec(&[], 4).is_err());
        assert!(fit_bin_spec(&[1.0, 2.0], 1).is_err());
    }

    #[test]
    fn histogram_cases() {
        let bins = BinSpec::new(0.0, 1.0, 2).unwrap();
        assert_eq!(histogram(&[0.0, 0.5, 1.0, 1.0], &bins).unwrap().probs, vec![0.25, 0.75]);
        assert_eq!(histogram(&[2.0], &bins).unwrap().probs, vec![0.0, 1.0]);
        assert_eq!(histogram(&[-7.0], &bins).unwrap().probs, vec![1.0, 0.0]);
        let bins = BinSpec::new(0.0, 4.0, 4).unwrap();
        assert_eq!(histogram(&[1.1, 1.2, 1.9], &bins).unwrap().probs, vec![0.0, 1.0, 0.0, 0.0]);
        assert!(histogram(&[], &bins).is_err());
    }

    #[test]
    fn density_scales_by_bin_length() {
        let h = hist(&[0.25, 0.75], 0.0, 4.0);
        assert_eq!(h.density(1), 0.375);
    }

    #[test]
    fn smooth_cases() {
        // Zero padding drains mass from the edge bins of a uniform input;
        // interior bins stay level.
        let u8 = hist(&[0.125; 8], 0.0, 1.0);
        let s = smooth(&u8, 3, DEFAULT_EPS).unwrap();
        assert!(s.probs[1..7].iter().all(|&p| (p - s.probs[1]).abs() < 1e-15));
        assert!(s.probs[0] < s.probs[1]);
        let u = hist(&[0.25; 4], 0.0, 1.0);
        let s = smooth(&u, 1, DEFAULT_EPS).unwrap();
        assert!(s.probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));

        let s = smooth(&hist(&[1.0, 0.0], 0.0, 1.0), 1, 0.01).unwrap();
        assert!((s.probs[0] - 1.01 / 1.02).abs() < 1e-15);
        assert!((s.probs[1] - 0.01 / 1.02).abs() < 1e-15);
        assert!((s.probs[0] - 0.99020).abs() < 1e-5 && (s.probs[1] - 0.00980).abs() < 1e-5);

        let third = 1.0 / 3.0;
        assert_eq!(box_filter(&[0.0, 1.0, 0.0, 0.0], 3), vec![third, third, third, 0.0]);
        // Even kernels lean left: window [b, b+1] for s = 2.
        assert_eq!(box_filter(&[0.0, 1.0, 0.0, 0.0], 2), vec![0.5, 0.5, 0.0, 0.0]);

        assert!(smooth(&u, 0, 0.01).is_err());
        assert!(smooth(&u, 1, 0.0).is_err());
    }

    #[test]
    fn mean_cases() {
        let a = hist(&[1.0, 0.0], 0.0, 1.0);
        let b = hist(&[0.0, 1.0], 0.0, 1.0);
        assert_eq!(mean_histogram(&[a.clone(), b]).unwrap().probs, vec![0.5, 0.5]);
        let m = mean_density(std::slice::from_ref(&a), 0.01).unwrap();
        assert_eq!(m.hist, a.epsilon_floor(0.01));
        assert_eq!(m.n_contributors, 1);
        let other = hist(&[0.5, 0.5], 0.0, 2.0);
        assert!(matches!(mean_histogram(&[a, other]), Err(Error::BinSpecMismatch)));
        assert!(mean_histogram(&[]).is_err());
    }

    #[test]
    fn mean_from_counts_matches_histogram_mean() {
        let bins = BinSpec::new(0.0, 1.0, 5).unwrap();
        let samples: Vec<Vec<f32>> = (0..7)
            .map(|s| (0..11).map(|k| ((s * 11 + k) as f32 * 0.61).fract()).collect())
            .collect();
        let hists: Vec<_> = samples.iter().map(|v| histogram(v, &bins).unwrap()).collect();
        let mut counts = vec![0; 5];
        for v in &samples {
            count_into(v, &bins, &mut counts);
        }
        let a = MeanDensity::from_counts(bins, &counts, 7, 0.01).unwrap();
        let b = mean_density(&hists, 0.01).unwrap();
        for (x, y) in a.hist.probs.iter().zip(&b.hist.probs) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sym_kl_cases() {
        let p = hist(&[0.75, 0.25], 0.0, 1.0);
        let q = hist(&[0.25, 0.75], 0.0, 1.0);
        assert!((sym_kl(&p, &q).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(sym_kl(&p, &p).unwrap(), 0.0);
        let z = hist(&[1.0, 0.0], 0.0, 1.0);
        assert!(matches!(sym_kl(&p, &z), Err(Error::ZeroProbability { bin: 1 })));
    }

    #[test]
    fn csv_dump() {
        let mut buf = Vec::new();
        hist(&[0.25, 0.75], 0.0, 1.0).write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "bin_lo,bin_hi,prob\n0,0.5,0.25\n0.5,1,0.75\n");
    }

    fn normalized(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn histogram_matches_naive_count(
            values in prop::collection::vec(-10f32..10.0, 1..400),
            lo in -5f64..0.0,
            width in 0.1f64..8.0,
            n in 2usize..60,
        ) {
            let bins = BinSpec::new(lo, lo + width, n).unwrap();
            let mut naive = vec![0u64; n];
            for &v in &values {
                naive[naive_index(&bins, v as f64)] += 1;
            }
            prop_assert_eq!(bin_counts(&values, &bins), naive);
            let h = histogram(&values, &bins).unwrap();
            prop_assert!((h.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn edge_values_match_naive(n in 2usize..50, lo in -3f64..3.0, width in 0.01f64..10.0) {
            let bins = BinSpec::new(lo, lo + width, n).unwrap();
            for b in 0..=n {
                let e = bins.edge(b);
                for v in [e, e.next_down(), e.next_up()] {
                    prop_assert_eq!(bins.index(v), naive_index(&bins, v));
                }
            }
        }

        #[test]
        fn smooth_normalized_and_floored(
            raw in prop::collection::vec(0f64..1.0, 2..120),
            s in 1usize..45,
            eps in 0.0001f64..0.1,
        ) {
            prop_assume!(raw.iter().sum::<f64>() > 0.0);
            let h = hist(&normalized(&raw), 0.0, 1.0);
            let out = smooth(&h, s, eps).unwrap();
            let n = raw.len() as f64;
            prop_assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let floor = eps / (1.0 + n * eps);
            prop_assert!(out.probs.iter().all(|&p| p >= floor * (1.0 - 1e-12)));
        }

        #[test]
        fn sym_kl_symmetric_nonneg_and_scale_free(
            a in prop::collection::vec(0.001f64..1.0, 2..40),
            b_seed in prop::collection::vec(0.001f64..1.0, 40),
            width in 0.01f64..100.0,
        ) {
            let n = a.len();
            let p = hist(&normalized(&a), 0.0, width);
            let q = hist(&normalized(&b_seed[..n]), 0.0, width);
            let pq = sym_kl(&p, &q).unwrap();
            prop_assert_eq!(pq, sym_kl(&q, &p).unwrap());
            prop_assert!(pq >= 0.0);
            prop_assert_eq!(sym_kl(&p, &p).unwrap(), 0.0);

            // Same divergence computed on densities with bin-length weights.
            let lb = p.bins.bin_len();
            let mut via_density = 0.0;
            for bin in 0..n {
                let (dp, dq) = (p.density(bin), q.density(bin));
                via_density += lb * dp * (dp / dq).ln() + lb * dq * (dq / dp).ln();
            }
            prop_assert!((via_density - pq).abs() < 1e-9 * (1.0 + pq));
        }

        #[test]
        fn mean_is_order_independent(
            hs in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 6), 1..30),
        ) {
            let hists: Vec<_> = hs.iter().map(|r| hist(&normalized(r), 0.0, 1.0)).collect();
            let m = mean_histogram(&hists).unwrap();
            prop_assert!((m.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for bin in 0..6 {
                let naive: f64 = hists.iter().map(|h| h.probs[bin]).sum::<f64>() / hists.len() as f64;
                prop_assert!((m.probs[bin] - naive).abs() < 1e-12);
            }
        }
    }
}
