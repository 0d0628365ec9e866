//! Runs a [`SuiteConfig`] and turns every test into report records.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::ggi::{avoidance_probability, delta_moment, ggi_battery, value_distribution, DeltaSpec, GibbsAverage};
use crate::harness::config::{zero_based, SamplerKind, SuiteConfig, TestKind, TestSpec};
use crate::harness::report::{ErrorKind, Record, SuiteReport, TestError, TestResult};
use crate::cascade::{pair_level_frequency, MeasureSource};
use crate::harness::rng::{map_replicates, StreamKey};
use crate::harness::stats::{normal_p_value, z_score, McEstimate};
use crate::invariance::{exchangeability_test, invariance_test, pd_tilt_invariance, tilted_gaussian_marks_test};
use crate::overlap::{Diagonal, DirectingMeasure, Level, LevelMatrix, QGrid};
use crate::pd::{check_recursion, first_weights, moment_recursion, moment_s, PdParams, PdSampler, DEFAULT_MAX_ATOMS, DEFAULT_TAIL_TOLERANCE};
use crate::ultrametric::{check_ultrametric, positivity_scan, psd_check, reconstruct, truncate_levels, PSD_TOLERANCE};

/// Tolerance on an expected eigenvalue.
const EIGEN_TOLERANCE: f64 = 1e-9;

#[derive(Default)]
struct Outcome {
    records: Vec<Record>,
    warnings: Vec<String>,
    diagnostic: bool,
}

impl Outcome {
    fn of(records: Vec<Record>) -> Self {
        Outcome {
            records,
            ..Default::default()
        }
    }
}

/// z against `target` after giving away the truncation bias bound.
fn estimate_record(name: impl Into<String>, anchor: &str, est: &McEstimate, target: f64) -> Record {
    let diff = est.mean - target;
    let z = z_score(diff.signum() * (diff.abs() - est.bias_bound).max(0.0), est.se);
    Record::statistical(name, anchor, est.mean, Some(target), Some(est.se), Some(z), normal_p_value(z))
}

fn two_sample_record(name: impl Into<String>, anchor: &str, a: &McEstimate, b: &McEstimate) -> Record {
    let se = (a.se * a.se + b.se * b.se).sqrt();
    let diff = a.mean - b.mean;
    let z = z_score(diff.signum() * (diff.abs() - a.bias_bound - b.bias_bound).max(0.0), se);
    Record::statistical(name, anchor, a.mean, Some(b.mean), Some(se), Some(z), normal_p_value(z))
}

fn p_record(name: impl Into<String>, anchor: &str, statistic: f64, p_value: f64) -> Record {
    Record::statistical(name, anchor, statistic, None, None, None, p_value)
}

fn error_kind(e: &Error) -> ErrorKind {
    match e {
        Error::ResourceCap(_) => ErrorKind::ResourceCap,
        Error::InsufficientData(_) => ErrorKind::InsufficientData,
        _ => ErrorKind::InvalidInput,
    }
}

/// Validates `config`, runs every test on a pool of `workers` threads (all
/// cores when `None`) and applies a Bonferroni split of the significance
/// over all statistical records. The report does not depend on `workers`.
pub fn run_suite(config: &SuiteConfig, workers: Option<usize>) -> Result<SuiteReport> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let start = Instant::now();
    let outcomes: Vec<Result<Outcome>> = pool.install(|| {
        config
            .tests
            .iter()
            .map(|t| run_test(t, config.grid.as_ref(), StreamKey::new(config.seed).named(&t.name), config.significance))
            .collect()
    });
    let elapsed = start.elapsed().as_secs_f64();

    let comparisons = outcomes
        .iter()
        .filter_map(|o| o.as_ref().ok())
        .flat_map(|o| &o.records)
        .filter(|r| !r.exact)
        .count()
        .max(1);
    let threshold = config.significance / comparisons as f64;
    let tests: Vec<TestResult> = config
        .tests
        .iter()
        .zip(outcomes)
        .map(|(spec, outcome)| match outcome {
            Ok(mut o) => {
                for r in o.records.iter_mut().filter(|r| !r.exact) {
                    r.rejected = r.p_value < threshold;
                }
                let rejected = o.records.iter().any(|r| r.rejected);
                TestResult {
                    name: spec.name.clone(),
                    expect_reject: spec.expect_reject,
                    rejected,
                    pass: o.diagnostic || rejected == spec.expect_reject,
                    diagnostic: o.diagnostic,
                    error: None,
                    records: o.records,
                    warnings: o.warnings,
                }
            }
            Err(e) => TestResult {
                name: spec.name.clone(),
                expect_reject: spec.expect_reject,
                rejected: false,
                pass: false,
                diagnostic: false,
                error: Some(TestError {
                    kind: error_kind(&e),
                    message: e.to_string(),
                }),
                records: Vec::new(),
                warnings: Vec::new(),
            },
        })
        .collect();
    Ok(SuiteReport {
        suite: config.name.clone(),
        seed: config.seed,
        significance: config.significance,
        correction: "bonferroni".into(),
        comparisons,
        threshold,
        all_pass: tests.iter().all(|t| t.pass),
        tests,
        wall_clock_seconds: config.include_timing.then_some(elapsed),
    })
}

fn sample_matrices(source: &MeasureSource, n: usize, samples: usize, key: StreamKey) -> Result<Vec<LevelMatrix>> {
    map_replicates(key, samples, |_, rng| source.sample_replicas(n, rng).map(|s| s.overlaps))
        .into_iter()
        .collect()
}

fn run_test(spec: &TestSpec, suite_grid: Option<&QGrid>, key: StreamKey, significance: f64) -> Result<Outcome> {
    use TestKind::*;
    let test = &spec.test;
    let grid = test.grid(suite_grid)?;
    let source = match (test.source(), grid) {
        (Some(s), Some(g)) => Some(s.build(g)?),
        _ => None,
    };
    let src = || source.as_ref().expect("test declares a source");
    let grid = || grid.expect("test declares a grid");
    let pd = |s: f64, tol: &Option<f64>| PdParams::with_tolerance(s, tol.unwrap_or(DEFAULT_TAIL_TOLERANCE), DEFAULT_MAX_ATOMS);

    Ok(match test {
        PdMoment {
            s,
            signature,
            sampler,
            n_atoms,
            tail_tolerance,
            target,
            replicates,
        } => {
            let sampler = match sampler {
                SamplerKind::PoissonProcess => PdSampler::PoissonProcess(pd(*s, tail_tolerance)?),
                SamplerKind::StickBreaking => PdSampler::StickBreaking {
                    s: *s,
                    n_atoms: n_atoms.unwrap_or_default(),
                },
            };
            let est = moment_s(&sampler, signature, *replicates, key)?;
            let target = target.unwrap_or_else(|| moment_recursion(*s, signature));
            Outcome::of(vec![estimate_record(signature.label(), "pd-moments", &est, target)])
        }
        PdRecursion {
            s,
            signature,
            coefficient,
            tail_tolerance,
            replicates,
        } => {
            let est = check_recursion(&pd(*s, tail_tolerance)?, signature, *replicates, *coefficient, key)?;
            Outcome::of(vec![estimate_record(format!("residual {}", signature.label()), "pd-recursion", &est, 0.0)])
        }
        PdSamplerAgreement { s, n_atoms, replicates } => {
            let a = first_weights(&PdSampler::PoissonProcess(PdParams::new(*s)?), *replicates, key.named("poisson-process"))?;
            let b = first_weights(&PdSampler::StickBreaking { s: *s, n_atoms: *n_atoms }, *replicates, key.named("stick-breaking"))?;
            let ks = crate::harness::stats::ks_two_sample(&a, &b)?;
            Outcome::of(vec![p_record("w1 ks", "pd-poisson-process", ks.statistic, ks.p_value)])
        }
        ValueDistribution { replicates, .. } => {
            let vd = value_distribution(src(), *replicates, key)?;
            Outcome::of(vec![p_record("R12 level chi-square", "overlap-value-law", vd.chi_square.statistic, vd.chi_square.p_value)])
        }
        PairCoincidence { replicates, .. } => {
            let top = grid().top();
            let est = pair_level_frequency(src(), top, *replicates, key)?;
            Outcome::of(vec![estimate_record("P(R12 = q_k)", "cascade-pair-coincidence", &est, grid().level_mass(top))])
        }
        GgiBattery { ns, mode, replicates, .. } => {
            let cases = crate::ggi::GgiCase::battery(grid().k(), ns.iter().copied());
            let ests = ggi_battery(src(), &cases, *replicates, *mode, key)?;
            Outcome::of(cases.iter().zip(&ests).map(|(c, e)| estimate_record(c.label(), "ggi", e, 0.0)).collect())
        }
        GgiCase {
            n,
            f,
            psi_level,
            mode,
            target,
            replicates,
            ..
        } => {
            let case = crate::ggi::GgiCase::new(*n, f.clone(), Level::new(*psi_level, grid().k())?)?;
            let est = ggi_battery(src(), std::slice::from_ref(&case), *replicates, *mode, key)?.remove(0);
            let mut rec = estimate_record(case.label(), "ggi", &est, target.unwrap_or(0.0));
            if *mode == GibbsAverage::Exact && *replicates == 1 {
                let holds = (est.mean - target.unwrap_or(0.0)).abs() <= 1e-12;
                rec = Record::exact(case.label(), "ggi", est.mean, Some(target.unwrap_or(0.0)), holds);
            }
            Outcome::of(vec![rec])
        }
        Avoidance { ns, level, replicates, .. } => {
            let level = Level::new(*level, grid().k())?;
            let mut records = Vec::new();
            for &n in ns {
                let a = avoidance_probability(src(), n, level, *replicates, key.child(n as u64))?;
                records.push(estimate_record(format!("n={n} level={level}"), "avoidance-closed-form", &a.estimate, a.closed_form));
            }
            Outcome::of(records)
        }
        DeltaMoment {
            n,
            order,
            f,
            averaging,
            target,
            replicates,
            ..
        } => {
            let d = DeltaSpec::new(*n, *order, f.clone())?;
            let est = delta_moment(src(), &d, *replicates, *averaging, key)?;
            Outcome::of(vec![estimate_record(format!("n={n} order={order} f={f}"), "delta-moments", &est, target.unwrap_or(0.0))])
        }
        Invariance {
            tilt,
            statistics,
            replicates,
            ..
        } => {
            let r = invariance_test(src(), tilt, *replicates, significance, key)?;
            let keep = |name: &str| statistics.as_ref().is_none_or(|s| s.iter().any(|x| x == name));
            let mut records = Vec::new();
            for c in r.comparisons.iter().filter(|c| keep(&c.statistic)) {
                let se = (c.untilted.se.powi(2) + c.tilted.se.powi(2)).sqrt();
                records.push(Record::statistical(
                    format!("{} z", c.statistic),
                    "tilt-invariance",
                    c.tilted.mean,
                    Some(c.untilted.mean),
                    Some(se),
                    Some(c.z),
                    c.z_p_value,
                ));
                records.push(p_record(format!("{} ks", c.statistic), "tilt-invariance", c.ks_statistic, c.ks_p_value));
            }
            if let Some(chi) = r.top_pair_level.as_ref().filter(|_| keep("top-pair-level")) {
                records.push(p_record("top-pair-level chi-square", "tilt-invariance", chi.statistic, chi.p_value));
            }
            Outcome {
                records,
                warnings: r.warnings,
                diagnostic: r.diagnostic,
            }
        }
        PdTiltInvariance {
            s,
            tilt,
            tail_tolerance,
            replicates,
        } => {
            let r = pd_tilt_invariance(&pd(*s, tail_tolerance)?, tilt, *replicates, key)?;
            Outcome {
                records: vec![
                    p_record("w1 ks", "pd-tilt-invariance", r.w1_ks.statistic, r.w1_ks.p_value),
                    estimate_record("sum w2 tilted", "pd-tilt-invariance", &r.sum_w2_tilted, r.sum_w2_target),
                    two_sample_record("sum w2 tilted vs fresh", "pd-tilt-invariance", &r.sum_w2_tilted, &r.sum_w2_fresh),
                ],
                warnings: tilt.warnings(),
                diagnostic: tilt.is_diagnostic(),
            }
        }
        TiltedMarks { s, t, prefix, replicates } => {
            let r = tilted_gaussian_marks_test(&PdParams::new(*s)?, *t, *prefix, *replicates, key)?;
            let mut records = Vec::new();
            for m in &r.ranks {
                records.push(estimate_record(format!("rank {} mean", m.rank), "tilted-gaussian-marks", &m.mean, r.mean_target));
                records.push(estimate_record(format!("rank {} variance", m.rank), "tilted-gaussian-marks", &m.variance, 1.0));
            }
            records.push(estimate_record("corr(mark 1, w1)", "tilted-gaussian-marks", &r.correlation, 0.0));
            Outcome::of(records)
        }
        Exchangeability { permutation, replicates, .. } => {
            let rho = zero_based(permutation)?;
            let r = exchangeability_test(src(), rho.len(), &rho, *replicates, key)?;
            Outcome::of(vec![p_record(
                format!("permutation {permutation:?}"),
                "weak-exchangeability",
                r.chi_square.statistic,
                r.chi_square.p_value,
            )])
        }
        Ultrametricity { n, samples, .. } => {
            let ms = sample_matrices(src(), *n, *samples, key)?;
            let violations: usize = ms.iter().map(|m| check_ultrametric(m).triples.len()).sum();
            Outcome::of(vec![Record::exact(
                format!("violating triples in {samples} samples of n={n}"),
                "ultrametricity",
                violations as f64,
                Some(0.0),
                violations == 0,
            )])
        }
        Truncation { n, samples, .. } => {
            let ms = sample_matrices(src(), *n, *samples, key)?;
            let mut broken = 0usize;
            let mut min_eig = f64::INFINITY;
            let mut counts = vec![0u64; grid().k() - 1];
            let mut tgrid = None;
            for m in &ms {
                let (t, g) = truncate_levels(m, grid())?;
                broken += check_ultrametric(&t).triples.len();
                min_eig = min_eig.min(psd_check(&t, &g, Diagonal::Unit)?.min_eigenvalue);
                min_eig = min_eig.min(psd_check(&t, &g, Diagonal::TopLevel)?.min_eigenvalue);
                counts[t.get(0, 1).get() - 1] += 1;
                tgrid = Some(g);
            }
            let tgrid = tgrid.expect("at least one sample");
            let expected: Vec<f64> = tgrid.level_masses().iter().map(|p| p * *samples as f64).collect();
            let chi = crate::harness::stats::chi_square_gof(&counts, &expected)?;
            Outcome::of(vec![
                p_record("truncated R12 level chi-square", "truncation", chi.statistic, chi.p_value),
                Record::exact("violating triples after truncation", "truncation", broken as f64, Some(0.0), broken == 0),
                Record::exact("min eigenvalue after truncation", "nonnegative-definiteness", min_eig, None, min_eig >= PSD_TOLERANCE),
            ])
        }
        Psd {
            levels,
            diagonal,
            expected_min,
            ..
        } => {
            let m = LevelMatrix::from_rows(levels, grid().k())?;
            let r = psd_check(&m, grid(), *diagonal)?;
            let rec = match expected_min {
                Some(e) => Record::exact("min eigenvalue", "nonnegative-definiteness", r.min_eigenvalue, Some(*e), (r.min_eigenvalue - e).abs() <= EIGEN_TOLERANCE),
                None => Record::exact("min eigenvalue", "nonnegative-definiteness", r.min_eigenvalue, None, r.pass),
            };
            Outcome::of(vec![rec])
        }
        Reconstruction {
            weights,
            levels,
            ns,
            trials,
            error_tolerance,
            coverage,
            recovery,
            ..
        } => {
            let measure = DirectingMeasure::explicit(weights.clone(), LevelMatrix::from_rows(levels, grid().k())?, grid().clone())?;
            let stats: Vec<ReconstructionStats> = ns
                .iter()
                .map(|&n| reconstruction_trials(&measure, n, *trials, key.child(n as u64)))
                .collect();
            let mut records: Vec<Record> = ns
                .iter()
                .zip(&stats)
                .map(|(n, s)| Record::exact(format!("n={n} median max weight error"), "reconstruction", s.median_error, None, true))
                .collect();
            let last = stats.last().expect("ns is nonempty");
            let n_last = ns.last().unwrap();
            records.push(Record::exact(
                format!("n={n_last} fraction with error <= {error_tolerance}"),
                "reconstruction",
                last.within(*error_tolerance),
                Some(*coverage),
                last.within(*error_tolerance) >= *coverage,
            ));
            records.push(Record::exact(
                format!("n={n_last} fraction with exact class overlaps"),
                "reconstruction",
                last.recovered,
                Some(*recovery),
                last.recovered >= *recovery,
            ));
            let monotone = stats.windows(2).all(|w| w[1].median_error < w[0].median_error);
            records.push(Record::exact("median error decreases in n", "reconstruction", monotone as u8 as f64, Some(1.0), monotone));
            Outcome::of(records)
        }
        Positivity { n, samples, .. } => {
            let ms = sample_matrices(src(), *n, *samples, key)?;
            let r = positivity_scan(&ms, grid());
            let min = r.min_value.unwrap_or(0.0);
            Outcome {
                records: vec![Record::exact("min off-diagonal overlap", "positivity", min, None, min >= 0.0)],
                warnings: r.warnings,
                diagnostic: false,
            }
        }
    })
}

/// Per-trial outcomes of reconstructing `measure` from `n` replicas.
pub struct ReconstructionStats {
    pub errors: Vec<f64>,
    pub median_error: f64,
    /// Fraction of trials whose classes and class overlaps match the atoms.
    pub recovered: f64,
}

impl ReconstructionStats {
    pub fn within(&self, tol: f64) -> f64 {
        self.errors.iter().filter(|&&e| e <= tol).count() as f64 / self.errors.len() as f64
    }
}

/// Max over ranks of the gap between estimated and true sorted weights, and
/// whether the classes with their overlaps match the sampled atoms.
pub fn reconstruction_trials(measure: &DirectingMeasure, n: usize, trials: usize, key: StreamKey) -> ReconstructionStats {
    let w = measure.weights().weights();
    let outcomes: Vec<(f64, bool)> = map_replicates(key, trials, |_, rng| {
        let s = measure.sample_replicas(n, rng);
        let r = reconstruct(&s.overlaps);
        let ranks = w.len().max(r.weights_est.len());
        let err = (0..ranks).map(|i| (r.weight(i) - w.get(i).copied().unwrap_or(0.0)).abs()).fold(0.0, f64::max);
        (err, !r.degenerate && classes_match(&s, &r, measure))
    });
    let errors: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    ReconstructionStats {
        median_error: crate::harness::stats::median(&errors),
        recovered: outcomes.iter().filter(|o| o.1).count() as f64 / trials as f64,
        errors,
    }
}

fn classes_match(s: &crate::overlap::ReplicaSample, r: &crate::ultrametric::Reconstruction, measure: &DirectingMeasure) -> bool {
    use crate::overlap::Site;
    let classes = r.class_counts.len();
    let mut atom_of = vec![None; classes];
    for (site, &c) in s.sites.iter().zip(&r.class_of) {
        let Site::Atom(a) = site else { return false };
        match atom_of[c] {
            None => atom_of[c] = Some(*a),
            Some(b) if b != *a => return false,
            _ => {}
        }
    }
    let atoms: Vec<usize> = atom_of.into_iter().map(|a| a.expect("every class has a replica")).collect();
    let m = r.class_overlaps.as_ref().expect("not degenerate");
    (0..classes).all(|a| (a + 1..classes).all(|b| atoms[a] != atoms[b] && m.get(a, b) == measure.atom_overlap(atoms[a], atoms[b])))
}
