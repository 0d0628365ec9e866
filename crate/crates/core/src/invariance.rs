//! Random changes of density and the invariances they should leave intact.
//!
//! Every atom `l` receives an independent mark (a Rademacher sign or a
//! standard Gaussian), the weights are tilted to
//! `w_l e^{t mark_l} / sum_p w_p e^{t mark_p}` and re-sorted. Truncated
//! mass stands for infinitely many small atoms, so it is scaled by the mean
//! factor `E e^{t mark}` instead of being marked.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cascade::MeasureSource;
use crate::error::{Error, Result};
use crate::harness::rng::{map_replicates, StreamKey};
use crate::harness::stats::{
    chi_square_homogeneity, ks_two_sample, normal_p_value, two_sample_z, ChiSquare, McEstimate, BATCHES,
};
use crate::overlap::{kahan_sum, DirectingMeasure, LevelMatrix, WeightSeq};
use crate::pd::{sample_pd, PdParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkKind {
    Rademacher,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltSpec {
    pub kind: MarkKind,
    pub t: f64,
}

impl TiltSpec {
    pub fn new(kind: MarkKind, t: f64) -> Result<Self> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidParameter(format!("tilt strength {t} must be finite and >= 0")));
        }
        Ok(Self { kind, t })
    }

    /// Rademacher tilts are only covered for `t < 1/2`; larger values run
    /// as diagnostics.
    pub fn is_diagnostic(&self) -> bool {
        self.kind == MarkKind::Rademacher && self.t >= 0.5
    }

    pub fn warnings(&self) -> Vec<String> {
        if self.is_diagnostic() {
            vec![format!("Rademacher tilt t = {} is outside t < 1/2; results are diagnostic only", self.t)]
        } else {
            Vec::new()
        }
    }

    pub fn draw_marks<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<f64> {
        match self.kind {
            MarkKind::Rademacher => (0..count).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect(),
            MarkKind::Gaussian => (0..count).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }

    /// `ln E e^{t mark}`.
    pub fn log_mean_factor(&self) -> f64 {
        let t = self.t;
        match self.kind {
            // ln cosh t without overflow
            MarkKind::Rademacher => t + (0.5 * (1.0 + (-2.0 * t).exp())).ln(),
            MarkKind::Gaussian => 0.5 * t * t,
        }
    }

    pub fn label(&self) -> String {
        let kind = match self.kind {
            MarkKind::Rademacher => "rademacher",
            MarkKind::Gaussian => "gaussian",
        };
        format!("{kind} t={}", self.t)
    }
}

/// Tilts weights and dust masses in log space. Returns them unsorted and
/// normalized.
/// Weights that underflow are kept at the smallest normal float so every
/// atom stays in the support.
fn tilt_masses(weights: &[f64], dust: &[f64], marks: &[f64], t: f64, log_dust_factor: f64) -> (Vec<f64>, Vec<f64>) {
    if t == 0.0 {
        return (weights.to_vec(), dust.to_vec());
    }
    let logs: Vec<f64> = weights.iter().zip(marks).map(|(w, g)| w.ln() + t * g).collect();
    let dust_logs: Vec<f64> = dust.iter().map(|m| m.ln() + log_dust_factor).collect();
    let top = logs.iter().chain(&dust_logs).copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let raw_dust: Vec<f64> = dust_logs.iter().map(|l| (l - top).exp()).collect();
    let total = kahan_sum(raw.iter().chain(&raw_dust).copied());
    (
        raw.iter().map(|x| (x / total).max(f64::MIN_POSITIVE)).collect(),
        raw_dust.iter().map(|x| (x / total).max(f64::MIN_POSITIVE)).collect(),
    )
}

/// A tilted and re-sorted measure with the marks carried along.
#[derive(Debug, Clone)]
pub struct TiltOutcome {
    /// Atoms in decreasing tilted weight, with their overlaps.
    pub measure: DirectingMeasure,
    /// New rank `r` holds original atom `permutation[r]`.
    pub permutation: Vec<usize>,
    /// `marks[r]` is the mark of original atom `permutation[r]`.
    pub marks: Vec<f64>,
    /// Bound on the error from scaling dust by its mean factor.
    pub dust_bias_bound: f64,
}

impl TiltOutcome {
    pub fn tilted_weights(&self) -> &WeightSeq {
        self.measure.weights()
    }

    /// Overlaps among the `n` heaviest tilted atoms.
    pub fn reordered_overlaps(&self, n: usize) -> LevelMatrix {
        self.measure.top_overlaps(n)
    }

    /// Tilted weights in the original atom order.
    pub fn unsorted_weights(&self) -> Vec<f64> {
        let w = self.measure.weights().weights();
        let mut out = vec![0.0; w.len()];
        for (r, &orig) in self.permutation.iter().enumerate() {
            out[orig] = w[r];
        }
        out
    }
}

/// Tilts `measure` with the given marks (one per atom, in the measure's
/// atom order).
pub fn tilt_with_marks(measure: &DirectingMeasure, spec: &TiltSpec, marks: &[f64]) -> Result<TiltOutcome> {
    if marks.len() != measure.atom_count() {
        return Err(Error::InvalidParameter(format!(
            "{} marks for {} atoms",
            marks.len(),
            measure.atom_count()
        )));
    }
    let dust: Vec<f64> = measure.dust().iter().map(|d| d.mass).collect();
    let (w, d) = tilt_masses(measure.weights().weights(), &dust, marks, spec.t, spec.log_mean_factor());
    let (tilted, permutation) = measure.reweighted(w, &d)?;
    let marks = permutation.iter().map(|&i| marks[i]).collect();
    let dust_bias_bound = measure.weights().tail_mass() * (spec.t - spec.log_mean_factor()).exp();
    Ok(TiltOutcome {
        measure: tilted,
        permutation,
        marks,
        dust_bias_bound,
    })
}

/// Draws fresh marks and tilts.
pub fn tilt_and_reorder<R: Rng + ?Sized>(measure: &DirectingMeasure, spec: &TiltSpec, rng: &mut R) -> Result<TiltOutcome> {
    let marks = spec.draw_marks(measure.atom_count(), rng);
    tilt_with_marks(measure, spec, &marks)
}

/// Tilts a bare weight sequence; returns the re-sorted weights and the
/// marks in the new order.
pub fn tilt_weight_seq<R: Rng + ?Sized>(w: &WeightSeq, spec: &TiltSpec, rng: &mut R) -> Result<(WeightSeq, Vec<f64>)> {
    let marks = spec.draw_marks(w.len(), rng);
    let dust = if w.tail_mass() > 0.0 { vec![w.tail_mass()] } else { Vec::new() };
    let (tw, td) = tilt_masses(w.weights(), &dust, &marks, spec.t, spec.log_mean_factor());
    let tail = td.first().copied().unwrap_or(0.0);
    let bound = w.tail_atom_bound() * (spec.t - spec.log_mean_factor()).exp();
    let (seq, perm) = WeightSeq::from_unsorted(tw, tail, w.tail_tolerance(), bound.min(tail))?;
    let marks = perm.iter().map(|&i| marks[i]).collect();
    Ok((seq, marks))
}

/// Scalar statistics of one (possibly tilted) measure.
#[derive(Debug, Clone)]
struct MeasureStats {
    scalars: Vec<f64>,
    top_pair_level: Option<usize>,
}

fn scalar_names(k: usize) -> Vec<String> {
    let mut names: Vec<String> = ["w1", "sum-w2", "gibbs-I{123}", "gibbs-I{12|3}", "gibbs-I{1|2|3}"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((1..=k).map(|l| format!("gibbs-I(R12=q_{l})")));
    names
}

fn measure_stats(m: &DirectingMeasure) -> MeasureStats {
    let w = m.weights();
    let (p2, p3) = (w.power_sum(2), w.power_sum(3));
    let mut scalars = vec![w.first(), p2, p3, p2 - p3, 1.0 - 3.0 * p2 + 2.0 * p3];
    scalars.extend(m.grid().levels().map(|l| m.pair_level_probability(l)));
    MeasureStats {
        scalars,
        top_pair_level: (m.atom_count() >= 2).then(|| m.atom_overlap(0, 1).get()),
    }
}

/// One statistic compared between arms.
#[derive(Debug, Clone, Serialize)]
pub struct ArmComparison {
    pub statistic: String,
    pub untilted: McEstimate,
    pub tilted: McEstimate,
    pub z: f64,
    pub z_p_value: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    pub tilt: TiltSpec,
    pub replicates: usize,
    pub comparisons: Vec<ArmComparison>,
    /// Homogeneity of the level between the two heaviest atoms.
    pub top_pair_level: Option<ChiSquare>,
    pub tests: usize,
    pub family_alpha: f64,
    /// Smallest p-value over all tests.
    pub min_p_value: f64,
    pub reject: bool,
    pub diagnostic: bool,
    pub warnings: Vec<String>,
}

impl InvarianceReport {
    /// Whether the `w_1` comparison (z or KS) alone rejects at the
    /// corrected level.
    pub fn w1_rejects(&self) -> bool {
        let cut = self.family_alpha / self.tests as f64;
        self.comparisons
            .iter()
            .find(|c| c.statistic == "w1")
            .is_some_and(|c| c.z_p_value < cut || c.ks_p_value < cut)
    }
}

/// Compares the statistic battery on untilted and tilted measures drawn on
/// independent streams. The family error `family_alpha` is split over all
/// z, KS and chi-square tests.
pub fn invariance_test(
    source: &MeasureSource,
    spec: &TiltSpec,
    replicates: usize,
    family_alpha: f64,
    key: StreamKey,
) -> Result<InvarianceReport> {
    let arm = |tilted: bool| -> Result<Vec<MeasureStats>> {
        let arm_key = key.named(if tilted { "tilted" } else { "untilted" });
        map_replicates(arm_key, replicates, |_, rng| {
            let m = source.measure(rng)?;
            if tilted {
                Ok(measure_stats(&tilt_and_reorder(&m, spec, rng)?.measure))
            } else {
                Ok(measure_stats(&m))
            }
        })
        .into_iter()
        .collect()
    };
    let plain = arm(false)?;
    let tilted = arm(true)?;
    let names = scalar_names(source.grid().k());
    let mut comparisons = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let a: Vec<f64> = plain.iter().map(|s| s.scalars[i]).collect();
        let b: Vec<f64> = tilted.iter().map(|s| s.scalars[i]).collect();
        let ea = McEstimate::from_values(&a, BATCHES, arm_seed(key, false))?;
        let eb = McEstimate::from_values(&b, BATCHES, arm_seed(key, true))?;
        let z = two_sample_z(&eb, &ea);
        let ks = ks_two_sample(&a, &b)?;
        comparisons.push(ArmComparison {
            statistic: name.clone(),
            untilted: ea,
            tilted: eb,
            z,
            z_p_value: normal_p_value(z),
            ks_statistic: ks.statistic,
            ks_p_value: ks.p_value,
        });
    }
    let top_pair_level = level_counts(&plain, source.grid().k())
        .zip(level_counts(&tilted, source.grid().k()))
        .map(|(a, b)| chi_square_homogeneity(&a, &b))
        .transpose()?;
    let tests = 2 * comparisons.len() + top_pair_level.is_some() as usize;
    let min_p_value = comparisons
        .iter()
        .flat_map(|c| [c.z_p_value, c.ks_p_value])
        .chain(top_pair_level.iter().map(|c| c.p_value))
        .fold(1.0, f64::min);
    Ok(InvarianceReport {
        tilt: *spec,
        replicates,
        comparisons,
        top_pair_level,
        tests,
        family_alpha,
        min_p_value,
        reject: min_p_value < family_alpha / tests as f64,
        diagnostic: spec.is_diagnostic(),
        warnings: spec.warnings(),
    })
}

fn arm_seed(key: StreamKey, tilted: bool) -> u64 {
    key.named(if tilted { "tilted" } else { "untilted" }).raw()
}

fn level_counts(stats: &[MeasureStats], k: usize) -> Option<Vec<u64>> {
    let mut counts = vec![0u64; k];
    for s in stats {
        counts[s.top_pair_level? - 1] += 1;
    }
    Some(counts)
}

#[derive(Debug, Clone, Serialize)]
pub struct PdInvarianceReport {
    pub s: f64,
    pub tilt: TiltSpec,
    pub w1_ks: crate::harness::stats::TestOutcome,
    pub sum_w2_tilted: McEstimate,
    pub sum_w2_fresh: McEstimate,
    /// `1 - s`.
    pub sum_w2_target: f64,
    pub z_tilted_vs_target: f64,
    pub z_tilted_vs_fresh: f64,
}

/// Re-sorted tilted PD(s) weights against fresh PD(s) weights.
pub fn pd_tilt_invariance(params: &PdParams, spec: &TiltSpec, replicates: usize, key: StreamKey) -> Result<PdInvarianceReport> {
    let tilted: Vec<(f64, f64, f64)> = map_replicates(key.named("tilted"), replicates, |_, rng| {
        let w = sample_pd(params, rng)?;
        let (tw, _) = tilt_weight_seq(&w, spec, rng)?;
        Ok((tw.first(), tw.power_sum(2), tw.power_sum_bias(2)))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let fresh: Vec<(f64, f64, f64)> = map_replicates(key.named("fresh"), replicates, |_, rng| {
        let w = sample_pd(params, rng)?;
        Ok((w.first(), w.power_sum(2), w.power_sum_bias(2)))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let col = |v: &[(f64, f64, f64)], i: usize| -> Vec<f64> {
        v.iter().map(|x| [x.0, x.1, x.2][i]).collect()
    };
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let w1_ks = ks_two_sample(&col(&tilted, 0), &col(&fresh, 0))?;
    let sum_w2_tilted = McEstimate::from_values(&col(&tilted, 1), BATCHES, key.named("tilted").raw())?.with_bias_bound(mean(col(&tilted, 2)));
    let sum_w2_fresh = McEstimate::from_values(&col(&fresh, 1), BATCHES, key.named("fresh").raw())?.with_bias_bound(mean(col(&fresh, 2)));
    let target = 1.0 - params.s;
    Ok(PdInvarianceReport {
        s: params.s,
        tilt: *spec,
        w1_ks,
        z_tilted_vs_target: sum_w2_tilted.z(target),
        z_tilted_vs_fresh: two_sample_z(&sum_w2_tilted, &sum_w2_fresh),
        sum_w2_tilted,
        sum_w2_fresh,
        sum_w2_target: target,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MarkRank {
    pub rank: usize,
    pub mean: McEstimate,
    pub variance: McEstimate,
}

#[derive(Debug, Clone, Serialize)]
pub struct TiltedMarksReport {
    pub s: f64,
    pub t: f64,
    /// `t s`.
    pub mean_target: f64,
    pub ranks: Vec<MarkRank>,
    /// Sample correlation of the top mark and the top tilted weight.
    pub correlation: McEstimate,
}

/// Marks carried to the top `prefix` ranks by a Gaussian tilt of PD(s)
/// weights: each should be `N(t s, 1)` and independent of the weights.
pub fn tilted_gaussian_marks_test(params: &PdParams, t: f64, prefix: usize, replicates: usize, key: StreamKey) -> Result<TiltedMarksReport> {
    let spec = TiltSpec::new(MarkKind::Gaussian, t)?;
    if prefix == 0 {
        return Err(Error::InvalidParameter("prefix must be >= 1".into()));
    }
    let draws: Vec<(f64, Vec<f64>)> = map_replicates(key, replicates, |_, rng| {
        let w = sample_pd(params, rng)?;
        let (tw, marks) = tilt_weight_seq(&w, &spec, rng)?;
        if marks.len() < prefix {
            return Err(Error::InsufficientData(format!("only {} atoms for a prefix of {prefix}", marks.len())));
        }
        Ok((tw.first(), marks[..prefix].to_vec()))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let seed = key.raw();
    let centered_square = |xs: &[f64]| -> Result<McEstimate> {
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
        McEstimate::from_values(&sq, BATCHES, seed)
    };
    let mut ranks = Vec::new();
    for r in 0..prefix {
        let g: Vec<f64> = draws.iter().map(|d| d.1[r]).collect();
        ranks.push(MarkRank {
            rank: r + 1,
            mean: McEstimate::from_values(&g, BATCHES, seed)?,
            variance: centered_square(&g)?,
        });
    }
    let g: Vec<f64> = draws.iter().map(|d| d.1[0]).collect();
    let w: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let n = g.len() as f64;
    let (mg, mw) = (g.iter().sum::<f64>() / n, w.iter().sum::<f64>() / n);
    let sg = (g.iter().map(|x| (x - mg).powi(2)).sum::<f64>() / n).sqrt();
    let sw = (w.iter().map(|x| (x - mw).powi(2)).sum::<f64>() / n).sqrt();
    let prod: Vec<f64> = g.iter().zip(&w).map(|(a, b)| (a - mg) * (b - mw) / (sg * sw)).collect();
    Ok(TiltedMarksReport {
        s: params.s,
        t,
        mean_target: t * params.s,
        ranks,
        correlation: McEstimate::from_values(&prod, BATCHES, seed)?,
    })
}

/// Largest outcome space for the exchangeability chi-square.
pub const MAX_EXCHANGE_CELLS: usize = 4096;

#[derive(Debug, Clone, Serialize)]
pub struct ExchangeabilityReport {
    pub n: usize,
    pub permutation: Vec<usize>,
    /// Outcomes in row-major order of the upper triangle, levels as digits
    /// base `k`.
    pub unpermuted: Vec<u64>,
    pub permuted: Vec<u64>,
    pub chi_square: ChiSquare,
}

fn encode(m: &LevelMatrix) -> usize {
    m.upper().fold(0, |acc, l| acc * m.k() + l.get() - 1)
}

/// Compares the law of the overlaps among the `n` heaviest atoms with the
/// law of the same overlaps relabelled by `rho`, on independent measure
/// draws. `rho` is zero-based; for the identity both arms share draws.
pub fn exchangeability_test(source: &MeasureSource, n: usize, rho: &[usize], replicates: usize, key: StreamKey) -> Result<ExchangeabilityReport> {
    if !(2..=4).contains(&n) || rho.len() != n {
        return Err(Error::InvalidParameter(format!("need 2 <= n <= 4 and a permutation of {n} ranks")));
    }
    let mut seen = vec![false; n];
    for &r in rho {
        if r >= n || std::mem::replace(&mut seen[r], true) {
            return Err(Error::InvalidParameter(format!("{rho:?} is not a permutation")));
        }
    }
    let k = source.grid().k();
    let cells = k.checked_pow((n * (n - 1) / 2) as u32).filter(|&c| c <= MAX_EXCHANGE_CELLS).ok_or_else(|| {
        Error::ResourceCap(format!("{k} levels on {n} ranks exceed {MAX_EXCHANGE_CELLS} outcome cells"))
    })?;
    let counts = |arm_key: StreamKey, perm: Option<&[usize]>| -> Result<Vec<u64>> {
        let codes: Vec<Result<usize>> = map_replicates(arm_key, replicates, |_, rng| {
            let m = source.measure_with_atoms(n, rng)?;
            let top = m.top_overlaps(n);
            Ok(encode(&perm.map_or(top.clone(), |p| top.permuted(p))))
        });
        let mut out = vec![0u64; cells];
        for c in codes {
            out[c?] += 1;
        }
        Ok(out)
    };
    let identity = rho.iter().enumerate().all(|(i, &r)| i == r);
    let unpermuted = counts(key.named("unpermuted"), None)?;
    let permuted = if identity {
        unpermuted.clone()
    } else {
        counts(key.named("permuted"), Some(rho))?
    };
    let chi_square = chi_square_homogeneity(&unpermuted, &permuted)?;
    Ok(ExchangeabilityReport {
        n,
        permutation: rho.to_vec(),
        unpermuted,
        permuted,
        chi_square,
    })
}
