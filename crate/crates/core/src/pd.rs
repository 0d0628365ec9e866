//! Poisson-Dirichlet weights.
//!
//! [`sample_pd`] enumerates the points of a Poisson process with intensity
//! `x^{-1-s} dx` in decreasing order: the number of points above `t` is
//! Poisson with mean `t^{-s}/s`, so the `l`-th largest point is
//! `u_l = (s G_l)^{-1/s}` with `G_l` the `l`-th arrival of a unit-rate
//! Poisson process. [`sample_pd_stick`] is an independent construction by
//! size-biased stick breaking, used as an oracle.
//!
//! # Truncation
//!
//! Given the smallest stored point `u_L = x`, the points below it form a
//! Poisson process on `(0, x)`, so the remainder has conditional mean
//! `x^{1-s}/(1-s)` and conditional mean square sum `x^{2-s}/(2-s)`.
//! Generation stops at the first `L` with
//!
//! ```text
//! x^{2-s} / ((2-s) T^2) < tail_tolerance,   T = sum_{l<=L} u_l + x^{1-s}/(1-s),
//! ```
//!
//! i.e. when two replicas would coincide inside the discarded tail with
//! probability below the tolerance. The conditional mean of the tail is kept
//! as explicit `tail_mass`, and the stored weights are normalized by `T`.
//! The relative error of that normalization has standard deviation at most
//! `sqrt((1-s)/(2-s) * tail_tolerance)`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::rng::{map_replicates, StreamKey};
use crate::harness::stats::{McEstimate, BATCHES};
use crate::overlap::{kahan_sum, WeightSeq};

/// Largest accepted PD parameter; atom counts explode as `s -> 1`.
pub const MAX_S: f64 = 0.95;
pub const DEFAULT_TAIL_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_MAX_ATOMS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdParams {
    pub s: f64,
    #[serde(default = "default_tolerance")]
    pub tail_tolerance: f64,
    #[serde(default = "default_max_atoms")]
    pub max_atoms: usize,
}

fn default_tolerance() -> f64 {
    DEFAULT_TAIL_TOLERANCE
}

fn default_max_atoms() -> usize {
    DEFAULT_MAX_ATOMS
}

impl PdParams {
    pub fn new(s: f64) -> Result<Self> {
        Self::with_tolerance(s, DEFAULT_TAIL_TOLERANCE, DEFAULT_MAX_ATOMS)
    }

    pub fn with_tolerance(s: f64, tail_tolerance: f64, max_atoms: usize) -> Result<Self> {
        let p = Self {
            s,
            tail_tolerance,
            max_atoms,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_S).contains(&self.s) {
            return Err(Error::InvalidParameter(format!(
                "PD parameter s = {} must lie in [0, {MAX_S}]",
                self.s
            )));
        }
        if !(self.tail_tolerance > 0.0 && self.tail_tolerance < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "tail tolerance {} must lie in (0, 1)",
                self.tail_tolerance
            )));
        }
        if self.max_atoms == 0 {
            return Err(Error::InvalidParameter("max_atoms must be positive".into()));
        }
        Ok(())
    }
}

/// Unnormalized decreasing points, scaled so that the first one is 1.
struct PoissonPoints {
    scaled: Vec<f64>,
    /// Conditional mean of the discarded points, same scale.
    tail: f64,
}

fn poisson_points<R: Rng + ?Sized>(params: &PdParams, rng: &mut R) -> Result<PoissonPoints> {
    params.validate()?;
    let s = params.s;
    let g1: f64 = Exp1.sample(rng);
    // u_l / u_1 = (G_1 / G_l)^{1/s};  u_1^{-s} = s G_1
    let scale = s * g1;
    let mut gamma = g1;
    let mut scaled = vec![1.0];
    let mut sum = 1.0;
    let mut last = 1.0f64;
    loop {
        let tail = last.powf(1.0 - s) * scale / (1.0 - s);
        let total = sum + tail;
        let coincidence = last.powf(2.0 - s) * scale / ((2.0 - s) * total * total);
        if coincidence < params.tail_tolerance {
            return Ok(PoissonPoints { scaled, tail });
        }
        if scaled.len() >= params.max_atoms {
            return Err(Error::ResourceCap(format!(
                "PD({s}) needs more than {} atoms for tail tolerance {}",
                params.max_atoms, params.tail_tolerance
            )));
        }
        let e: f64 = Exp1.sample(rng);
        gamma += e;
        let u = (g1 / gamma).powf(1.0 / s);
        if u == 0.0 {
            return Ok(PoissonPoints { scaled, tail: 0.0 });
        }
        scaled.push(u);
        sum += u;
        last = u;
    }
}

/// Draws PD(s) weights by the decreasing enumeration of the Poisson
/// process. `s = 0` gives the single weight 1.
pub fn sample_pd<R: Rng + ?Sized>(params: &PdParams, rng: &mut R) -> Result<WeightSeq> {
    params.validate()?;
    if params.s == 0.0 {
        return Ok(WeightSeq::point_mass());
    }
    let pts = poisson_points(params, rng)?;
    let total = kahan_sum(pts.scaled.iter().copied()) + pts.tail;
    let weights: Vec<f64> = pts.scaled.iter().map(|u| u / total).collect();
    let last = *weights.last().unwrap();
    let tail_mass = (1.0 - kahan_sum(weights.iter().copied())).max(0.0);
    WeightSeq::new(weights, tail_mass, params.tail_tolerance, last.min(tail_mass))
}

/// Stick-breaking PD(s): the `i`-th stick takes a `Beta(1 - s, i s)`
/// fraction of what is left; the pieces are then sorted. What remains after
/// `n_atoms` sticks is the tail.
pub fn sample_pd_stick<R: Rng + ?Sized>(s: f64, n_atoms: usize, rng: &mut R) -> Result<WeightSeq> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidParameter(format!("stick breaking needs 0 < s < 1, got {s}")));
    }
    if n_atoms == 0 {
        return Err(Error::InvalidParameter("n_atoms must be at least 1".into()));
    }
    let mut pieces = Vec::with_capacity(n_atoms);
    let mut rest = 1.0;
    for i in 1..=n_atoms {
        let v = Beta::new(1.0 - s, i as f64 * s).unwrap().sample(rng);
        let piece = rest * v;
        if piece <= 0.0 {
            break;
        }
        pieces.push(piece);
        rest *= 1.0 - v;
    }
    let n = pieces.len() as f64;
    let tol = rest * rest * (1.0 - s) / (1.0 + n * s);
    finish_sticks(pieces, tol, rest)
}

fn finish_sticks(pieces: Vec<f64>, tol: f64, bound: f64) -> Result<WeightSeq> {
    let tail_mass = (1.0 - kahan_sum(pieces.iter().copied())).max(0.0);
    let (seq, _) = WeightSeq::from_unsorted(pieces, tail_mass, tol, bound.min(tail_mass))?;
    Ok(seq)
}

/// Two-parameter Poisson-Dirichlet `PD(alpha, theta)` by GEM stick
/// breaking (`V_i ~ Beta(1 - alpha, theta + i alpha)`), sorted. Sticks are
/// added until the expected self-coincidence of the remainder,
/// `r^2 (1 - alpha) / (1 + theta + n alpha)`, drops below the tolerance.
pub fn sample_pd_two_param<R: Rng + ?Sized>(
    alpha: f64,
    theta: f64,
    tail_tolerance: f64,
    max_atoms: usize,
    rng: &mut R,
) -> Result<WeightSeq> {
    if !(alpha > 0.0 && alpha < 1.0) || theta <= -alpha {
        return Err(Error::InvalidParameter(format!(
            "PD(alpha, theta) needs 0 < alpha < 1 and theta > -alpha, got ({alpha}, {theta})"
        )));
    }
    let mut pieces = Vec::new();
    let mut rest = 1.0f64;
    loop {
        let n = pieces.len() as f64;
        let coincidence = rest * rest * (1.0 - alpha) / (1.0 + theta + n * alpha);
        if !pieces.is_empty() && coincidence < tail_tolerance {
            return finish_sticks(pieces, coincidence, rest);
        }
        if pieces.len() >= max_atoms {
            return Err(Error::ResourceCap(format!(
                "PD({alpha}, {theta}) needs more than {max_atoms} atoms for tail tolerance {tail_tolerance}"
            )));
        }
        let v = Beta::new(1.0 - alpha, theta + (n + 1.0) * alpha).unwrap().sample(rng);
        let piece = rest * v;
        if piece <= 0.0 {
            return finish_sticks(pieces, coincidence, rest);
        }
        pieces.push(piece);
        rest *= 1.0 - v;
    }
}

/// Exponents `(n_1, ..., n_m)` of `S(n_1..n_m) = E prod_j sum_l w_l^{n_j}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct MomentSignature(Vec<u32>);

impl TryFrom<Vec<u32>> for MomentSignature {
    type Error = Error;
    fn try_from(v: Vec<u32>) -> Result<Self> {
        MomentSignature::new(v)
    }
}

impl From<MomentSignature> for Vec<u32> {
    fn from(m: MomentSignature) -> Self {
        m.0
    }
}

impl MomentSignature {
    pub fn new(exponents: Vec<u32>) -> Result<Self> {
        if exponents.is_empty() || exponents.contains(&0) {
            return Err(Error::InvalidParameter(format!(
                "moment signature {exponents:?} must be nonempty with entries >= 1"
            )));
        }
        Ok(Self(exponents))
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn total(&self) -> u32 {
        self.0.iter().sum()
    }

    /// `prod_j sum_l w_l^{n_j}` for one weight sequence, and the bound on
    /// what the truncated tail could add.
    pub fn evaluate(&self, w: &WeightSeq) -> (f64, f64) {
        let value = self.0.iter().map(|&p| w.power_sum(p)).product();
        let bias = self.0.iter().map(|&p| w.power_sum_bias(p)).sum();
        (value, bias)
    }

    pub fn label(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|p| p.to_string()).collect();
        format!("S({})", parts.join(","))
    }
}

/// `S(n_1..n_m)` from the recursion in `n`, starting at `S(1) = 1` and
/// `S(1, rest) = S(rest)`.
pub fn moment_recursion(s: f64, signature: &MomentSignature) -> f64 {
    fn go(s: f64, mut e: Vec<u32>, memo: &mut HashMap<Vec<u32>, f64>) -> f64 {
        e.sort_unstable_by(|a, b| b.cmp(a));
        while e.last() == Some(&1) {
            e.pop();
        }
        if e.is_empty() {
            return 1.0;
        }
        if let Some(&v) = memo.get(&e) {
            return v;
        }
        let mut base = e.clone();
        base[0] -= 1;
        let n: u32 = base.iter().sum();
        let n = n as f64;
        let mut v = (base[0] as f64 - s) / n * go(s, base.clone(), memo);
        for p in 1..base.len() {
            let mut merged = base.clone();
            let x = merged.remove(p);
            merged[0] += x;
            v += base[p] as f64 / n * go(s, merged, memo);
        }
        memo.insert(e, v);
        v
    }
    go(s, signature.exponents().to_vec(), &mut HashMap::new())
}

/// Which PD construction feeds a moment estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PdSampler {
    PoissonProcess(PdParams),
    StickBreaking { s: f64, n_atoms: usize },
}

impl PdSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<WeightSeq> {
        match self {
            PdSampler::PoissonProcess(p) => sample_pd(p, rng),
            PdSampler::StickBreaking { s, n_atoms } => sample_pd_stick(*s, *n_atoms, rng),
        }
    }

    pub fn s(&self) -> f64 {
        match self {
            PdSampler::PoissonProcess(p) => p.s,
            PdSampler::StickBreaking { s, .. } => *s,
        }
    }
}

fn collect<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Monte Carlo estimate of `S(n_1..n_m)`. The bias bound is the mean over
/// replicates of `sum_j tail_mass * tail_atom_bound^{n_j - 1}`.
pub fn moment_s(sampler: &PdSampler, signature: &MomentSignature, replicates: usize, key: StreamKey) -> Result<McEstimate> {
    let draws = collect(map_replicates(key, replicates, |_, rng| {
        sampler.sample(rng).map(|w| signature.evaluate(&w))
    }))?;
    let values: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let bias = draws.iter().map(|d| d.1).sum::<f64>() / replicates as f64;
    Ok(McEstimate::from_values(&values, BATCHES, key.raw())?.with_bias_bound(bias))
}

/// First (largest) weights of `replicates` independent draws.
pub fn first_weights(sampler: &PdSampler, replicates: usize, key: StreamKey) -> Result<Vec<f64>> {
    collect(map_replicates(key, replicates, |_, rng| sampler.sample(rng).map(|w| w.first())))
}

/// Coefficient of `S(n_1, ..)` in the recursion; `Perturbed` drops the `-s`
/// to give a control whose residual is shifted by `-(s/n) S(n_1..n_m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecursionCoefficient {
    #[default]
    Exact,
    Perturbed,
}

/// Residual of
/// `S(n_1+1, n_2..) - ((n_1 - s)/n) S(n_1..) - sum_{p>=2} (n_p/n) S(n_1+n_p, ..without n_p..)`,
/// every term evaluated on the same weight sequence of each replicate.
pub fn check_recursion(
    params: &PdParams,
    signature: &MomentSignature,
    replicates: usize,
    coefficient: RecursionCoefficient,
    key: StreamKey,
) -> Result<McEstimate> {
    let e = signature.exponents();
    let n = signature.total() as f64;
    let n1 = e[0] as f64;
    let lead = match coefficient {
        RecursionCoefficient::Exact => (n1 - params.s) / n,
        RecursionCoefficient::Perturbed => n1 / n,
    };
    let mut bumped = e.to_vec();
    bumped[0] += 1;
    let mut terms = vec![(1.0, MomentSignature(bumped)), (-lead, signature.clone())];
    for p in 1..e.len() {
        let mut merged = vec![e[0] + e[p]];
        merged.extend(e[1..].iter().enumerate().filter(|(i, _)| i + 1 != p).map(|(_, &x)| x));
        terms.push((-(e[p] as f64) / n, MomentSignature(merged)));
    }
    let sampler = PdSampler::PoissonProcess(*params);
    let draws = collect(map_replicates(key, replicates, |_, rng| {
        sampler.sample(rng).map(|w| {
            terms.iter().fold((0.0, 0.0), |(v, b), (c, sig)| {
                let (x, bias) = sig.evaluate(&w);
                (v + c * x, b + c.abs() * bias)
            })
        })
    }))?;
    let values: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let bias = draws.iter().map(|d| d.1).sum::<f64>() / replicates as f64;
    Ok(McEstimate::from_values(&values, BATCHES, key.raw())?.with_bias_bound(bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::rng::rng_stream;

    #[test]
    fn s_zero_is_point_mass() {
        let w = sample_pd(&PdParams::new(0.0).unwrap(), &mut rng_stream(0, 0)).unwrap();
        assert_eq!(w.weights(), &[1.0]);
        assert_eq!(w.tail_mass(), 0.0);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(PdParams::new(0.96).is_err());
        assert!(PdParams::new(-0.1).is_err());
        assert!(PdParams::with_tolerance(0.5, 0.0, 10).is_err());
        assert!(sample_pd_stick(0.0, 10, &mut rng_stream(0, 0)).is_err());
        assert!(sample_pd_two_param(0.5, -0.6, 1e-3, 100, &mut rng_stream(0, 0)).is_err());
        assert!(MomentSignature::new(vec![]).is_err());
        assert!(MomentSignature::new(vec![2, 0]).is_err());
    }

    #[test]
    fn max_atoms_signals_resource_cap() {
        let p = PdParams::with_tolerance(0.9, 1e-8, 50).unwrap();
        assert!(matches!(sample_pd(&p, &mut rng_stream(1, 0)), Err(Error::ResourceCap(_))));
    }

    #[test]
    fn mass_is_conserved_and_sequences_decrease() {
        for (i, s) in [0.05, 0.3, 0.5, 0.7, 0.9].into_iter().enumerate() {
            let p = PdParams::new(s).unwrap();
            for r in 0..20 {
                let mut rng = rng_stream(i as u64, r);
                let w = sample_pd(&p, &mut rng).unwrap();
                let total = kahan_sum(w.weights().iter().copied()) + w.tail_mass();
                assert!((total - 1.0).abs() < 1e-12);
                assert!(w.weights().windows(2).all(|x| x[0] > x[1]), "strictly decreasing");
                let st = sample_pd_stick(s, 200, &mut rng).unwrap();
                assert!((kahan_sum(st.weights().iter().copied()) + st.tail_mass() - 1.0).abs() < 1e-12);
                assert!(st.weights().windows(2).all(|x| x[0] >= x[1]));
            }
        }
    }

    #[test]
    fn tail_criterion_is_met() {
        let p = PdParams::new(0.7).unwrap();
        let mut rng = rng_stream(5, 0);
        for _ in 0..50 {
            let w = sample_pd(&p, &mut rng).unwrap();
            // expected tail coincidence is below tolerance, so the bias bound
            // on S(2) (tail mass times largest tail atom) is small too
            assert!(w.power_sum_bias(2) < 20.0 * p.tail_tolerance);
        }
    }

    #[test]
    fn first_stick_fraction_mean() {
        // Beta(1 - s, s) has mean 1 - s
        let s = 0.5;
        let n = 20_000;
        let mut rng = rng_stream(9, 0);
        let mean = (0..n)
            .map(|_| Beta::new(1.0 - s, s).unwrap().sample(&mut rng))
            .sum::<f64>()
            / n as f64;
        // sd of Beta(0.5, 0.5) is sqrt(1/8)
        assert!((mean - 0.5).abs() < 3.0 * (0.125f64 / n as f64).sqrt());
    }

    #[test]
    fn two_param_top_level_matches_one_param_s2() {
        // PD(alpha, theta): E sum w^2 = (1 - alpha) / (1 + theta)
        let key = StreamKey::new(21);
        for (alpha, theta) in [(0.7, -0.4), (0.4, 0.0)] {
            let vals: Vec<f64> = map_replicates(key.child((alpha * 10.0) as u64), 20_000, |_, rng| {
                sample_pd_two_param(alpha, theta, 1e-4, 100_000, rng).unwrap().power_sum(2)
            });
            let est = McEstimate::from_values(&vals, 100, 0).unwrap();
            let target = (1.0 - alpha) / (1.0 + theta);
            assert!(est.within(target, 4.0), "{alpha} {theta}: {} +- {} vs {target}", est.mean, est.se);
        }
    }

    #[test]
    fn recursion_values() {
        let sig = |e: Vec<u32>| MomentSignature::new(e).unwrap();
        assert!((moment_recursion(0.5, &sig(vec![2])) - 0.5).abs() < 1e-15);
        assert!((moment_recursion(0.3, &sig(vec![3])) - 0.595).abs() < 1e-15);
        assert_eq!(moment_recursion(0.4, &sig(vec![1, 1])), 1.0);
    }

    #[test]
    fn recursion_terms_are_built_correctly() {
        // S(1): n = 1, S(2) - (1 - s) S(1); check on a fixed sequence
        let w = WeightSeq::new(vec![0.5, 0.3, 0.2], 0.0, 0.0, 0.0).unwrap();
        let sig = MomentSignature::new(vec![2, 1]).unwrap();
        assert!((sig.evaluate(&w).0 - 0.38).abs() < 1e-15);
        assert_eq!(MomentSignature::new(vec![2, 2]).unwrap().label(), "S(2,2)");
    }

    #[test]
    fn perturbed_gap_is_positive() {
        // Perturbed minus exact lead coefficient times S(sig) equals (s/n) S(sig)
        let p = PdParams::new(0.5).unwrap();
        let sig = MomentSignature::new(vec![1]).unwrap();
        let key = StreamKey::new(4);
        let exact = check_recursion(&p, &sig, 2000, RecursionCoefficient::Exact, key).unwrap();
        let pert = check_recursion(&p, &sig, 2000, RecursionCoefficient::Perturbed, key).unwrap();
        assert!((exact.mean - pert.mean - 0.5).abs() < 1e-12);
    }
}
