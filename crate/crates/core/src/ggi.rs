//! Monte Carlo checks of the Ghirlanda-Guerra identities and their
//! consequences: the avoidance probabilities, the law of `R_12`, and the
//! vanishing of the `Delta`-moments.
//!
//! All expectations average over the measure as well as the replicas: a
//! [`MeasureSource::Cascade`] redraws the cascade for every replicate.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::cascade::MeasureSource;
use crate::error::{Error, Result};
use crate::harness::rng::{batch_means, map_replicates, StreamKey};
use crate::harness::stats::{bonferroni_z, chi_square_gof, ChiSquare, McEstimate, BATCHES};
use crate::overlap::{DirectingMeasure, Level, LevelMatrix, PartitionSpec, QGrid, ReplicaSample, Site};

/// Largest number of atom tuples enumerated per measure in exact mode.
pub const EXACT_TUPLE_LIMIT: usize = 1 << 20;

/// The function `f_n` of the first `n` replicas.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum GgiFunction {
    Constant,
    /// Indicator that the overlaps of the first `n` replicas follow the
    /// pattern.
    Partition(PartitionSpec),
}

impl GgiFunction {
    /// `f = 1{sigma^1 = sigma^2}` on `n` replicas (all other pairs at level 1).
    pub fn coincidence(n: usize, k: usize) -> Result<Self> {
        let m = LevelMatrix::from_pairs(n, k, |i, j| {
            if i + j == 1 {
                Level::from_raw(k)
            } else {
                Level::LOWEST
            }
        });
        Ok(GgiFunction::Partition(PartitionSpec::new(m)?))
    }

    #[inline]
    pub fn eval(&self, overlaps: &LevelMatrix) -> bool {
        match self {
            GgiFunction::Constant => true,
            GgiFunction::Partition(p) => p.matches(overlaps),
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            GgiFunction::Constant => None,
            GgiFunction::Partition(p) => Some(p.n()),
        }
    }
}

impl fmt::Display for GgiFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GgiFunction::Constant => write!(f, "1"),
            GgiFunction::Partition(p) => {
                let m = p.constraint();
                let upper: Vec<String> = m.upper().map(|l| l.to_string()).collect();
                write!(f, "I[{}]", upper.join(","))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum RawFunction {
    Constant,
    Partition(Vec<Vec<usize>>),
}

impl Serialize for GgiFunction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GgiFunction::Constant => RawFunction::Constant,
            GgiFunction::Partition(p) => RawFunction::Partition(p.constraint().rows()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GgiFunction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match RawFunction::deserialize(d)? {
            RawFunction::Constant => Ok(GgiFunction::Constant),
            RawFunction::Partition(rows) => {
                let k = rows.first().and_then(|r| r.first()).copied().unwrap_or(1);
                LevelMatrix::from_rows(&rows, k)
                    .and_then(PartitionSpec::new)
                    .map(GgiFunction::Partition)
                    .map_err(serde::de::Error::custom)
            }
        }
    }
}

/// One identity: `n` replicas, `f_n`, and `psi = 1{x = q_level}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgiCase {
    pub n: usize,
    pub f: GgiFunction,
    pub psi_level: Level,
}

impl GgiCase {
    pub fn new(n: usize, f: GgiFunction, psi_level: Level) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("GGI needs n >= 2, got {n}")));
        }
        if let Some(a) = f.arity() {
            if a != n {
                return Err(Error::InvalidParameter(format!("f acts on {a} replicas, case has n = {n}")));
            }
        }
        Ok(Self { n, f, psi_level })
    }

    fn validate(&self, grid: &QGrid) -> Result<()> {
        Level::new(self.psi_level.get(), grid.k())?;
        if let GgiFunction::Partition(p) = &self.f {
            if p.constraint().k() != grid.k() {
                return Err(Error::InvalidParameter(format!(
                    "f uses {} levels but the grid has {}",
                    p.constraint().k(),
                    grid.k()
                )));
            }
        }
        Ok(())
    }

    /// Every case with `n` in `ns`, `f` constant or a realizable pattern on
    /// `n` replicas, and `psi` at every level.
    pub fn battery(k: usize, ns: impl IntoIterator<Item = usize>) -> Vec<GgiCase> {
        let mut out = Vec::new();
        for n in ns {
            let fs = std::iter::once(GgiFunction::Constant).chain(PartitionSpec::enumerate(n, k).into_iter().map(GgiFunction::Partition));
            for f in fs {
                for l in 1..=k {
                    out.push(GgiCase {
                        n,
                        f: f.clone(),
                        psi_level: Level::from_raw(l),
                    });
                }
            }
        }
        out
    }

    pub fn label(&self) -> String {
        format!("n={} f={} psi=I(R=q_{})", self.n, self.f, self.psi_level)
    }
}

/// How replicas are averaged for each measure draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GibbsAverage {
    /// One draw of replicas per measure.
    #[default]
    Sampled,
    /// Exact enumeration over all atom tuples (small measures without dust).
    Exact,
}

/// Feeds `(overlaps, weight)` pairs for one measure draw into `add`.
fn for_each_draw<R, F>(source: &MeasureSource, replicas: usize, mode: GibbsAverage, rng: &mut R, mut add: F) -> Result<()>
where
    R: Rng + ?Sized,
    F: FnMut(&LevelMatrix, f64),
{
    match mode {
        GibbsAverage::Sampled => {
            let s = source.sample_replicas(replicas, rng)?;
            add(&s.overlaps, 1.0);
        }
        GibbsAverage::Exact => {
            let m = source.measure(rng)?;
            enumerate_tuples(&m, replicas, |sites, w| {
                let ov = LevelMatrix::from_pairs(replicas, m.grid().k(), |i, j| m.atom_overlap(sites[i], sites[j]));
                add(&ov, w);
            })?;
        }
    }
    Ok(())
}

/// Calls `f(tuple, probability)` for every tuple of `n` atoms.
pub(crate) fn enumerate_tuples(m: &DirectingMeasure, n: usize, mut f: impl FnMut(&[usize], f64)) -> Result<()> {
    if !m.dust().is_empty() && m.weights().tail_mass() > 0.0 {
        return Err(Error::InvalidParameter("exact Gibbs averages need a measure without truncated mass".into()));
    }
    let a = m.atom_count();
    let total = (a as f64).powi(n as i32);
    if total > EXACT_TUPLE_LIMIT as f64 {
        return Err(Error::ResourceCap(format!("{a}^{n} atom tuples exceed the exact enumeration limit")));
    }
    let w = m.weights().weights();
    let mut idx = vec![0usize; n];
    loop {
        let p: f64 = idx.iter().map(|&i| w[i]).product();
        f(&idx, p);
        let mut pos = 0;
        loop {
            if pos == n {
                return Ok(());
            }
            idx[pos] += 1;
            if idx[pos] < a {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// Residual estimates for a set of cases, all from common draws of
/// `max n + 1` replicas.
///
/// The residual of a case is
/// `E f psi(R_{1,n+1}) - (1/n) E f E psi(R_12) - (1/n) sum_{l=2}^n E f psi(R_{1l})`.
/// Its standard error comes from batch means of the linearization
/// `a - (F psi_bar + F_bar psi - F_bar psi_bar)/n - b/n`, where `a`, `F`,
/// `psi`, `b` are the per-replicate values of the four averages.
pub fn ggi_battery(
    source: &MeasureSource,
    cases: &[GgiCase],
    replicates: usize,
    mode: GibbsAverage,
    key: StreamKey,
) -> Result<Vec<McEstimate>> {
    let grid = source.grid().clone();
    let k = grid.k();
    for c in cases {
        c.validate(&grid)?;
    }
    let replicas = cases.iter().map(|c| c.n + 1).max().unwrap_or(2);
    let width = 3 * cases.len() + k;
    let accumulate = |ov: &LevelMatrix, w: f64, acc: &mut [f64]| {
        let r12 = ov.get(0, 1).get();
        acc[3 * cases.len() + r12 - 1] += w;
        for (c, case) in cases.iter().enumerate() {
            if !case.f.eval(ov) {
                continue;
            }
            let l = case.psi_level;
            acc[3 * c + 1] += w;
            if ov.get(0, case.n) == l {
                acc[3 * c] += w;
            }
            let hits = (1..case.n).filter(|&j| ov.get(0, j) == l).count();
            acc[3 * c + 2] += w * hits as f64;
        }
    };
    let run = |_: usize, rng: &mut rand_chacha::ChaCha8Rng, acc: &mut [f64]| {
        for_each_draw(source, replicas, mode, rng, |ov, w| accumulate(ov, w, acc))
    };
    let (means, batch_size) = if replicates == 1 && mode == GibbsAverage::Exact {
        let mut acc = vec![0.0; width];
        run(0, &mut key.child(0).rng(), &mut acc)?;
        (vec![acc], 1)
    } else {
        (batch_means(key, replicates, BATCHES, width, run)?, replicates / BATCHES)
    };
    let b = means.len() as f64;
    let overall: Vec<f64> = (0..width).map(|i| means.iter().map(|m| m[i]).sum::<f64>() / b).collect();
    Ok(cases
        .iter()
        .enumerate()
        .map(|(c, case)| {
            let n = case.n as f64;
            let psi_slot = 3 * cases.len() + case.psi_level.get() - 1;
            let (f_bar, psi_bar) = (overall[3 * c + 1], overall[psi_slot]);
            let xs: Vec<f64> = means
                .iter()
                .map(|m| m[3 * c] - (m[3 * c + 1] * psi_bar + f_bar * m[psi_slot] - f_bar * psi_bar) / n - m[3 * c + 2] / n)
                .collect();
            if xs.len() == 1 {
                McEstimate::exact(xs[0], key.raw())
            } else {
                McEstimate::from_batch_means(&xs, batch_size, key.raw())
            }
        })
        .collect())
}

/// Residual of a single identity; see [`ggi_battery`]. With
/// [`GibbsAverage::Exact`] and one replicate the result is exact.
pub fn ggi_residual(source: &MeasureSource, case: &GgiCase, replicates: usize, mode: GibbsAverage, key: StreamKey) -> Result<McEstimate> {
    Ok(ggi_battery(source, std::slice::from_ref(case), replicates, mode, key)?.remove(0))
}

#[derive(Debug, Clone, Serialize)]
pub struct GgiCaseResult {
    pub case: GgiCase,
    pub estimate: McEstimate,
    pub z: f64,
    pub reject: bool,
}

/// Battery outcome under a Bonferroni split of `family_alpha`.
#[derive(Debug, Clone, Serialize)]
pub struct GgiBatteryReport {
    pub family_alpha: f64,
    pub critical_z: f64,
    pub results: Vec<GgiCaseResult>,
    pub rejections: usize,
}

pub fn assess_battery(cases: &[GgiCase], estimates: &[McEstimate], family_alpha: f64) -> GgiBatteryReport {
    let critical_z = bonferroni_z(family_alpha, cases.len());
    let results: Vec<GgiCaseResult> = cases
        .iter()
        .zip(estimates)
        .map(|(case, est)| {
            let z = est.z(0.0);
            GgiCaseResult {
                case: case.clone(),
                estimate: est.clone(),
                z,
                reject: z.abs() > critical_z,
            }
        })
        .collect();
    let rejections = results.iter().filter(|r| r.reject).count();
    GgiBatteryReport {
        family_alpha,
        critical_z,
        results,
        rejections,
    }
}

/// `m (1 + m) ... (n - 1 + m) / n!`.
pub fn avoidance_closed_form(m: f64, n: usize) -> f64 {
    (0..n).map(|i| (i as f64 + m) / (i as f64 + 1.0)).product()
}

#[derive(Debug, Clone, Serialize)]
pub struct Avoidance {
    pub n: usize,
    pub level: Level,
    /// Mass of the complement of `{q_level}`.
    pub m: f64,
    pub closed_form: f64,
    pub estimate: McEstimate,
}

/// Probability that none of `R_{1,2}, ..., R_{1,n+1}` equals `q_level`.
pub fn avoidance_probability(source: &MeasureSource, n: usize, level: Level, replicates: usize, key: StreamKey) -> Result<Avoidance> {
    if n == 0 {
        return Err(Error::InvalidParameter("avoidance needs n >= 1".into()));
    }
    let grid = source.grid();
    let level = Level::new(level.get(), grid.k())?;
    let m = 1.0 - grid.level_mass(level);
    let rows = batch_means(key, replicates, BATCHES, 1, |_, rng, acc| {
        let s = source.sample_replicas(n + 1, rng)?;
        if (1..=n).all(|j| s.overlaps.get(0, j) != level) {
            acc[0] += 1.0;
        }
        Ok(())
    })?;
    let means: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    Ok(Avoidance {
        n,
        level,
        m,
        closed_form: avoidance_closed_form(m, n),
        estimate: McEstimate::from_batch_means(&means, replicates / BATCHES, key.raw()),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueDistribution {
    pub counts: Vec<u64>,
    pub probabilities: Vec<f64>,
    pub chi_square: ChiSquare,
}

/// Histogram of the level of `R_12` against `m_{l+1} - m_l`.
pub fn value_distribution(source: &MeasureSource, replicates: usize, key: StreamKey) -> Result<ValueDistribution> {
    if replicates < 1000 {
        return Err(Error::InsufficientData(format!("{replicates} replicates; at least 1000 needed")));
    }
    let grid = source.grid();
    let levels = map_replicates(key, replicates, |_, rng| source.sample_replicas(2, rng).map(|s| s.overlaps.get(0, 1).get()));
    let mut counts = vec![0u64; grid.k()];
    for l in levels {
        counts[l? - 1] += 1;
    }
    let probabilities = grid.level_masses();
    let expected: Vec<f64> = probabilities.iter().map(|p| p * replicates as f64).collect();
    let chi_square = chi_square_gof(&counts, &expected)?;
    Ok(ValueDistribution {
        counts,
        probabilities,
        chi_square,
    })
}

/// `E <f_n Delta_{n+1} ... Delta_{n+order}>` with
/// `Delta_l = eps(sigma^1) + ... + eps(sigma^{l-1}) - (l-1) eps(sigma^l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSpec {
    pub n: usize,
    pub order: usize,
    pub f: GgiFunction,
}

impl DeltaSpec {
    pub fn new(n: usize, order: usize, f: GgiFunction) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidParameter("Delta-moment order must be >= 1".into()));
        }
        if n == 0 || f.arity().is_some_and(|a| a != n) {
            return Err(Error::InvalidParameter(format!("f does not act on n = {n} replicas")));
        }
        Ok(Self { n, order, f })
    }
}

/// How the Rademacher marks are averaged out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MarkAveraging {
    /// Every sign pattern on the distinct atoms hit.
    #[default]
    Exact,
    /// One random pattern and its negation.
    Antithetic,
}

fn delta_product(spec: &DeltaSpec, marks: &[i64]) -> f64 {
    let mut prod = 1i64;
    let mut prefix: i64 = marks[..spec.n].iter().sum();
    for l in spec.n..spec.n + spec.order {
        prod *= prefix - l as i64 * marks[l];
        prefix += marks[l];
    }
    prod as f64
}

fn delta_value<R: Rng + ?Sized>(spec: &DeltaSpec, sample: &ReplicaSample, averaging: MarkAveraging, rng: &mut R) -> f64 {
    if !spec.f.eval(&sample.overlaps) {
        return 0.0;
    }
    let mut ids: HashMap<&Site, usize> = HashMap::new();
    let atom: Vec<usize> = sample
        .sites
        .iter()
        .map(|s| {
            let next = ids.len();
            *ids.entry(s).or_insert(next)
        })
        .collect();
    let d = ids.len();
    let marks_of = |signs: u64| -> Vec<i64> { atom.iter().map(|&a| if signs >> a & 1 == 1 { 1 } else { -1 }).collect() };
    match averaging {
        MarkAveraging::Exact => {
            let total: f64 = (0..1u64 << d).map(|s| delta_product(spec, &marks_of(s))).sum();
            total / (1u64 << d) as f64
        }
        MarkAveraging::Antithetic => {
            let s: u64 = rng.gen::<u64>() & ((1u64 << d) - 1);
            let plus = delta_product(spec, &marks_of(s));
            let minus = delta_product(spec, &marks_of(!s & ((1u64 << d) - 1)));
            0.5 * (plus + minus)
        }
    }
}

pub fn delta_moment(
    source: &MeasureSource,
    spec: &DeltaSpec,
    replicates: usize,
    averaging: MarkAveraging,
    key: StreamKey,
) -> Result<McEstimate> {
    if let GgiFunction::Partition(p) = &spec.f {
        if p.constraint().k() != source.grid().k() {
            return Err(Error::InvalidParameter("f and measure use different grids".into()));
        }
    }
    let replicas = spec.n + spec.order;
    if replicas > 20 {
        return Err(Error::ResourceCap(format!("{replicas} replicas exceed the mark enumeration limit")));
    }
    let rows = batch_means(key, replicates, BATCHES, 1, |_, rng, acc| {
        let s = source.sample_replicas(replicas, rng)?;
        acc[0] += delta_value(spec, &s, averaging, rng);
        Ok(())
    })?;
    let means: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    Ok(McEstimate::from_batch_means(&means, replicates / BATCHES, key.raw()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::CascadeParams;

    fn grid2() -> QGrid {
        QGrid::new(vec![0.0, 1.0], vec![0.0, 0.6, 1.0]).unwrap()
    }

    fn two_atoms() -> MeasureSource {
        let m = DirectingMeasure::explicit(vec![0.5, 0.5], LevelMatrix::filled(2, 2, Level::LOWEST), grid2()).unwrap();
        MeasureSource::Fixed(m)
    }

    #[test]
    fn constant_function_is_exactly_zero() {
        let three = DirectingMeasure::explicit(
            vec![0.5, 0.3, 0.2],
            LevelMatrix::from_rows(&[vec![2, 1, 2], vec![1, 2, 1], vec![2, 1, 2]], 2).unwrap(),
            grid2(),
        )
        .unwrap();
        for src in [two_atoms(), MeasureSource::Fixed(three)] {
            for n in 2..=4 {
                for l in 1..=2 {
                    let case = GgiCase::new(n, GgiFunction::Constant, Level::from_raw(l)).unwrap();
                    let est = ggi_residual(&src, &case, 1, GibbsAverage::Exact, StreamKey::new(1)).unwrap();
                    assert_eq!(est.se, 0.0);
                    assert!(est.mean.abs() < 1e-14, "{n} {l}: {}", est.mean);
                }
            }
        }
    }

    #[test]
    fn two_atom_control_exact_value() {
        let case = GgiCase::new(2, GgiFunction::coincidence(2, 2).unwrap(), Level::from_raw(2)).unwrap();
        let est = ggi_residual(&two_atoms(), &case, 1, GibbsAverage::Exact, StreamKey::new(1)).unwrap();
        assert!((est.mean + 0.125).abs() < 1e-15);
    }

    #[test]
    fn exact_mode_rejects_dust() {
        let src = MeasureSource::Cascade(CascadeParams::new(grid2(), 0));
        let case = GgiCase::new(2, GgiFunction::Constant, Level::from_raw(1)).unwrap();
        assert!(ggi_residual(&src, &case, 1, GibbsAverage::Exact, StreamKey::new(0)).is_err());
    }

    #[test]
    fn case_validation() {
        assert!(GgiCase::new(1, GgiFunction::Constant, Level::LOWEST).is_err());
        assert!(GgiCase::new(3, GgiFunction::coincidence(2, 2).unwrap(), Level::LOWEST).is_err());
        assert!(DeltaSpec::new(2, 0, GgiFunction::Constant).is_err());
        // constant plus 5 patterns on 3 replicas with 2 levels, times 2 levels
        assert_eq!(GgiCase::battery(2, [3]).len(), 12);
    }

    #[test]
    fn avoidance_closed_form_values() {
        assert!((avoidance_closed_form(0.6, 3) - 0.416).abs() < 1e-12);
        assert!((avoidance_closed_form(0.4, 1) - 0.4).abs() < 1e-15);
        assert_eq!(avoidance_closed_form(1.0, 5), 1.0);
    }

    #[test]
    fn order_one_delta_moment_is_exactly_zero() {
        let src = MeasureSource::Cascade(CascadeParams::new(grid2(), 0));
        for f in [GgiFunction::Constant, GgiFunction::coincidence(2, 2).unwrap()] {
            let spec = DeltaSpec::new(2, 1, f).unwrap();
            for avg in [MarkAveraging::Exact, MarkAveraging::Antithetic] {
                let est = delta_moment(&src, &spec, 1000, avg, StreamKey::new(3)).unwrap();
                assert_eq!(est.mean, 0.0);
                assert_eq!(est.se, 0.0);
            }
        }
    }

    #[test]
    fn function_serializes_as_rows() {
        let f = GgiFunction::coincidence(2, 2).unwrap();
        let text = serde_json::to_string(&f).unwrap();
        assert_eq!(text, r#"{"partition":[[2,2],[2,2]]}"#);
        let back: GgiFunction = serde_json::from_str(&text).unwrap();
        assert_eq!(back, f);
    }
}
