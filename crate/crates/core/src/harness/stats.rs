//! Estimators and tests: batch-means standard errors, two-sample
//! Kolmogorov-Smirnov, chi-square goodness of fit and homogeneity.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Default number of batch means behind every standard error.
pub const BATCHES: usize = 100;
/// Fewest batch means accepted for a standard error.
pub const MIN_BATCHES: usize = 30;

/// A Monte Carlo estimate with its batch-means standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub se: f64,
    pub replicates: usize,
    pub batches: usize,
    pub seed: u64,
    /// Bound on the bias from truncated weight tails, where applicable.
    pub bias_bound: f64,
}

impl McEstimate {
    /// Estimate from per-replicate values split into `batches` contiguous
    /// batches of equal size.
    pub fn from_values(values: &[f64], batches: usize, seed: u64) -> Result<Self> {
        check_batching(values.len(), batches)?;
        let size = values.len() / batches;
        let means: Vec<f64> = values.chunks(size).map(|c| c.iter().sum::<f64>() / size as f64).collect();
        Ok(Self::from_batch_means(&means, size, seed))
    }

    /// Estimate from already-computed batch means.
    pub fn from_batch_means(means: &[f64], batch_size: usize, seed: u64) -> Self {
        let b = means.len() as f64;
        let mean = means.iter().sum::<f64>() / b;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (b - 1.0);
        Self {
            mean,
            se: (var / b).sqrt(),
            replicates: batch_size * means.len(),
            batches: means.len(),
            seed,
            bias_bound: 0.0,
        }
    }

    /// A value computed without sampling error.
    pub fn exact(value: f64, seed: u64) -> Self {
        Self {
            mean: value,
            se: 0.0,
            replicates: 1,
            batches: 0,
            seed,
            bias_bound: 0.0,
        }
    }

    pub fn with_bias_bound(mut self, bias: f64) -> Self {
        self.bias_bound = bias;
        self
    }

    /// `(mean - target) / se`; infinite when `se = 0` and the values differ.
    pub fn z(&self, target: f64) -> f64 {
        z_score(self.mean - target, self.se)
    }

    /// `|mean - target| <= sigmas * se` (plus the truncation bias bound).
    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        (self.mean - target).abs() <= sigmas * self.se + self.bias_bound + 1e-12
    }
}

pub(crate) fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff.abs() <= 1e-12 {
        0.0
    } else {
        diff.signum() * f64::INFINITY
    }
}

/// Replicates must split into at least [`MIN_BATCHES`] equal batches.
pub fn check_batching(replicates: usize, batches: usize) -> Result<()> {
    if batches < MIN_BATCHES {
        return Err(Error::InsufficientData(format!(
            "{batches} batches; at least {MIN_BATCHES} are needed for a standard error"
        )));
    }
    if replicates < batches || replicates % batches != 0 {
        return Err(Error::InsufficientData(format!(
            "{replicates} replicates do not split into {batches} equal batches"
        )));
    }
    Ok(())
}

/// Rounds a replicate count up to a multiple of [`BATCHES`].
pub fn round_replicates(replicates: usize) -> usize {
    replicates.max(BATCHES).div_ceil(BATCHES) * BATCHES
}

/// Two-sided normal p-value of a z statistic.
pub fn normal_p_value(z: f64) -> f64 {
    if !z.is_finite() {
        return if z.is_nan() { 1.0 } else { 0.0 };
    }
    let n = Normal::new(0.0, 1.0).unwrap();
    2.0 * n.cdf(-z.abs())
}

/// `Phi^{-1}(p)`.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

/// Two-sided critical |z| for family error `alpha` shared by `tests` tests.
pub fn bonferroni_z(alpha: f64, tests: usize) -> f64 {
    normal_quantile(1.0 - alpha / (2.0 * tests.max(1) as f64))
}

/// Family error rate of a two-sided `sigmas`-SE band.
pub fn sigma_alpha(sigmas: f64) -> f64 {
    normal_p_value(sigmas)
}

/// z statistic of the difference between two independent estimates.
pub fn two_sample_z(a: &McEstimate, b: &McEstimate) -> f64 {
    z_score(a.mean - b.mean, (a.se * a.se + b.se * b.se).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p_value: f64,
}

/// Minimum sample size for the KS test.
pub const KS_MIN_SAMPLE: usize = 50;

/// Two-sided two-sample Kolmogorov-Smirnov test with the asymptotic
/// Kolmogorov p-value (with the usual small-sample correction of the
/// effective size).
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<TestOutcome> {
    if a.len() < KS_MIN_SAMPLE || b.len() < KS_MIN_SAMPLE {
        return Err(Error::InsufficientData(format!(
            "KS needs at least {KS_MIN_SAMPLE} values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    Ok(TestOutcome {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

/// `Q_KS(lambda) = 2 sum_{j>=1} (-1)^{j-1} exp(-2 j^2 lambda^2)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=200 {
        let term = sign * (-2.0 * (j as f64 * lambda).powi(2)).exp();
        sum += term;
        if term.abs() < 1e-16 * sum.abs().max(1e-300) {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Chi-square result with the cell merges that were applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Groups of original cell indices pooled to reach expected count >= 5.
    pub merged: Vec<Vec<usize>>,
}

const MIN_EXPECTED: f64 = 5.0;

/// Groups adjacent cells until each group's expected count reaches 5; a
/// short final group is folded into its predecessor.
fn merge_cells(expected: &[f64]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut acc = 0.0;
    for (i, &e) in expected.iter().enumerate() {
        current.push(i);
        acc += e;
        if acc >= MIN_EXPECTED {
            groups.push(std::mem::take(&mut current));
            acc = 0.0;
        }
    }
    if !current.is_empty() {
        match groups.last_mut() {
            Some(last) => last.extend(current),
            None => groups.push(current),
        }
    }
    groups
}

/// Pearson goodness of fit of `observed` counts against `expected`
/// probabilities.
pub fn chi_square_gof(observed: &[u64], expected: &[f64]) -> Result<ChiSquare> {
    if observed.len() != expected.len() {
        return Err(Error::InvalidParameter("observed and expected lengths differ".into()));
    }
    if expected.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::InvalidParameter("expected probabilities must be non-negative".into()));
    }
    let total_p: f64 = expected.iter().sum();
    if total_p <= 0.0 {
        return Err(Error::InvalidParameter("all expected cells are zero".into()));
    }
    let n: u64 = observed.iter().sum();
    if n == 0 {
        return Err(Error::InsufficientData("no observations".into()));
    }
    // an observation in a cell of probability zero is decisive
    if observed.iter().zip(expected).any(|(&o, &p)| p == 0.0 && o > 0) {
        return Ok(ChiSquare {
            statistic: f64::INFINITY,
            dof: expected.len().saturating_sub(1),
            p_value: 0.0,
            merged: Vec::new(),
        });
    }
    let keep: Vec<usize> = (0..expected.len()).filter(|&i| expected[i] > 0.0).collect();
    let exp_counts: Vec<f64> = keep.iter().map(|&i| expected[i] / total_p * n as f64).collect();
    let groups: Vec<Vec<usize>> = merge_cells(&exp_counts)
        .into_iter()
        .map(|g| g.into_iter().map(|c| keep[c]).collect())
        .collect();
    let mut stat = 0.0;
    for g in &groups {
        let o: f64 = g.iter().map(|&i| observed[i] as f64).sum();
        let e: f64 = g.iter().map(|&i| expected[i] / total_p * n as f64).sum();
        stat += (o - e).powi(2) / e;
    }
    let dof = groups.len() - 1;
    let merged = groups.into_iter().filter(|g| g.len() > 1).collect();
    Ok(ChiSquare {
        statistic: stat,
        dof,
        p_value: chi_square_sf(stat, dof),
        merged,
    })
}

/// Chi-square test that two samples of category counts share one law.
pub fn chi_square_homogeneity(a: &[u64], b: &[u64]) -> Result<ChiSquare> {
    if a.len() != b.len() {
        return Err(Error::InvalidParameter("category counts differ in length".into()));
    }
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InsufficientData("empty sample".into()));
    }
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| (x + y) as f64).collect();
    let keep: Vec<usize> = (0..a.len()).filter(|&i| pooled[i] > 0.0).collect();
    let smaller = na.min(nb);
    let exp_small: Vec<f64> = keep.iter().map(|&i| pooled[i] * smaller / n).collect();
    let groups: Vec<Vec<usize>> = merge_cells(&exp_small)
        .into_iter()
        .map(|g| g.into_iter().map(|c| keep[c]).collect())
        .collect();
    let mut stat = 0.0;
    for g in &groups {
        let oa: f64 = g.iter().map(|&i| a[i] as f64).sum();
        let ob: f64 = g.iter().map(|&i| b[i] as f64).sum();
        let tot = oa + ob;
        let (ea, eb) = (tot * na / n, tot * nb / n);
        stat += (oa - ea).powi(2) / ea + (ob - eb).powi(2) / eb;
    }
    let dof = groups.len() - 1;
    let merged = groups.into_iter().filter(|g| g.len() > 1).collect();
    Ok(ChiSquare {
        statistic: stat,
        dof,
        p_value: chi_square_sf(stat, dof),
        merged,
    })
}

fn chi_square_sf(stat: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    if !stat.is_finite() {
        return 0.0;
    }
    1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat)
}

/// Median of a slice (NaN-free input).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::rng::rng_stream;
    use rand::Rng;

    #[test]
    fn batch_means_match_direct_mean() {
        let values: Vec<f64> = (0..1000).map(|i| (i % 7) as f64).collect();
        let est = McEstimate::from_values(&values, 100, 0).unwrap();
        let direct = values.iter().sum::<f64>() / 1000.0;
        assert!((est.mean - direct).abs() < 1e-12);
        assert_eq!(est.replicates, 1000);
        assert_eq!(est.batches, 100);
        assert!(McEstimate::from_values(&values, 20, 0).is_err());
        assert!(McEstimate::from_values(&values[..999], 100, 0).is_err());
    }

    #[test]
    fn batch_se_matches_iid_se() {
        let mut rng = rng_stream(3, 0);
        let values: Vec<f64> = (0..100_000).map(|_| rng.gen::<f64>()).collect();
        let est = McEstimate::from_values(&values, 100, 0).unwrap();
        let iid = (1.0f64 / 12.0 / 100_000.0).sqrt();
        // sd of a 100-batch SE estimate is about 7%
        assert!((est.se / iid - 1.0).abs() < 0.3, "se {} vs {}", est.se, iid);
    }

    #[test]
    fn ks_identical_samples() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let r = ks_two_sample(&x, &x).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
        assert!(ks_two_sample(&x[..10], &x).is_err());
    }

    #[test]
    fn ks_known_statistic() {
        // disjoint supports: D = 1
        let a: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..60).map(|i| 100.0 + i as f64).collect();
        let r = ks_two_sample(&a, &b).unwrap();
        assert_eq!(r.statistic, 1.0);
        assert!(r.p_value < 1e-10);
    }

    #[test]
    fn ks_calibration_and_power() {
        let n = 10_000;
        let mut rejections = 0;
        let trials = 200;
        for t in 0..trials {
            let mut rng = rng_stream(17, t);
            let a: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
            if ks_two_sample(&a, &b).unwrap().p_value < 0.01 {
                rejections += 1;
            }
        }
        // expected 2 of 200; P(Binomial(200, 0.01) > 8) < 1e-3
        assert!(rejections <= 8, "{rejections} false rejections");
        let mut rng = rng_stream(18, 0);
        let a: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 0.1).collect();
        assert!(ks_two_sample(&a, &b).unwrap().p_value < 0.01);
    }

    #[test]
    fn kolmogorov_q_reference_values() {
        // Q_KS(1.36) ~ 0.0495, Q_KS(1.63) ~ 0.0098
        assert!((kolmogorov_q(1.36) - 0.0495).abs() < 1e-3);
        assert!((kolmogorov_q(1.628) - 0.0100).abs() < 5e-4);
    }

    #[test]
    fn chi_square_proportional_counts() {
        let r = chi_square_gof(&[40, 30, 30], &[0.4, 0.3, 0.3]).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert_eq!(r.dof, 2);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chi_square_swapped_masses_reject() {
        let r = chi_square_gof(&[30_000, 40_000, 30_000], &[0.4, 0.3, 0.3]).unwrap();
        assert!(r.p_value < 1e-10);
    }

    #[test]
    fn chi_square_merges_small_cells() {
        let r = chi_square_gof(&[50, 48, 1, 1], &[0.5, 0.48, 0.01, 0.01]).unwrap();
        assert_eq!(r.merged, vec![vec![1, 2, 3]]);
        assert_eq!(r.dof, 1);
        assert!(chi_square_gof(&[1, 2], &[0.0, 0.0]).is_err());
        assert_eq!(chi_square_gof(&[1, 2], &[0.0, 1.0]).unwrap().p_value, 0.0);
    }

    #[test]
    fn chi_square_reference_p_value() {
        // chi2 with 2 dof: sf(x) = exp(-x/2)
        assert!((chi_square_sf(4.0, 2) - (-2.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn homogeneity_detects_difference() {
        let same = chi_square_homogeneity(&[500, 300, 200], &[510, 290, 200]).unwrap();
        assert!(same.p_value > 0.1);
        let diff = chi_square_homogeneity(&[500, 300, 200], &[300, 500, 200]).unwrap();
        assert!(diff.p_value < 1e-10);
        // point masses on different cells
        let pm = chi_square_homogeneity(&[1000, 0], &[0, 1000]).unwrap();
        assert!(pm.p_value < 1e-10);
    }

    #[test]
    fn bonferroni_threshold() {
        assert!((bonferroni_z(0.05, 1) - 1.959964).abs() < 1e-5);
        assert!(bonferroni_z(0.01, 100) > bonferroni_z(0.01, 10));
        assert!((sigma_alpha(3.0) - 0.0026998).abs() < 1e-6);
    }
}
