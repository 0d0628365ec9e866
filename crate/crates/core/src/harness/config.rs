//! Suite configuration. A suite is a seed, a significance level and a list
//! of named tests; every test is validated before anything is sampled.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeParams, MeasureSource};
use crate::error::{Error, Result};
use crate::ggi::{GgiFunction, GibbsAverage, MarkAveraging};
use crate::harness::stats::BATCHES;
use crate::invariance::TiltSpec;
use crate::overlap::{Diagonal, DirectingMeasure, Level, LevelMatrix, QGrid};
use crate::pd::{MomentSignature, PdParams, RecursionCoefficient, DEFAULT_MAX_ATOMS, DEFAULT_TAIL_TOLERANCE};

pub const DEFAULT_SIGNIFICANCE: f64 = 0.01;

fn default_significance() -> f64 {
    DEFAULT_SIGNIFICANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub name: String,
    pub seed: u64,
    /// Family error rate, split over all records by Bonferroni.
    #[serde(default = "default_significance")]
    pub significance: f64,
    /// Grid used by tests that do not set their own.
    #[serde(default)]
    pub grid: Option<QGrid>,
    /// Record the wall-clock time in the report (breaks byte-identical
    /// reruns).
    #[serde(default)]
    pub include_timing: bool,
    #[serde(default)]
    pub output: OutputPaths,
    #[serde(default)]
    pub tests: Vec<TestSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestSpec {
    pub name: String,
    /// The test is a negative control: it passes when it rejects.
    #[serde(default)]
    pub expect_reject: bool,
    pub test: TestKind,
}

/// Where replicas come from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceSpec {
    /// A fresh cascade on the grid for every replicate.
    #[default]
    Cascade,
    CascadeWith {
        #[serde(default)]
        tail_tolerance: Option<f64>,
        #[serde(default)]
        branching_cap: Option<usize>,
    },
    /// A fixed measure: weights and the level matrix between atoms.
    Explicit { weights: Vec<f64>, levels: Vec<Vec<usize>> },
}

impl SourceSpec {
    pub fn build(&self, grid: &QGrid) -> Result<MeasureSource> {
        match self {
            SourceSpec::Cascade => Ok(MeasureSource::Cascade(CascadeParams::new(grid.clone(), 0))),
            SourceSpec::CascadeWith {
                tail_tolerance,
                branching_cap,
            } => {
                let p = CascadeParams {
                    grid: grid.clone(),
                    branching_cap: branching_cap.unwrap_or(DEFAULT_MAX_ATOMS),
                    tail_tolerance: tail_tolerance.unwrap_or(DEFAULT_TAIL_TOLERANCE),
                    seed: 0,
                };
                p.validate()?;
                Ok(MeasureSource::Cascade(p))
            }
            SourceSpec::Explicit { weights, levels } => {
                let m = LevelMatrix::from_rows(levels, grid.k())?;
                Ok(MeasureSource::Fixed(DirectingMeasure::explicit(weights.clone(), m, grid.clone())?))
            }
        }
    }
}

/// A grid and a measure source, for commands that work on one measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub grid: QGrid,
    #[serde(default)]
    pub source: SourceSpec,
}

impl MeasureConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: MeasureConfig = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.source.build(&cfg.grid)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    #[default]
    PoissonProcess,
    StickBreaking,
}

/// The tests a suite can run. Field `grid` overrides the suite grid;
/// `source` defaults to a cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum TestKind {
    /// `S(n_1..n_m)` against its value from the recursion (or `target`).
    PdMoment {
        s: f64,
        signature: MomentSignature,
        #[serde(default)]
        sampler: SamplerKind,
        #[serde(default)]
        n_atoms: Option<usize>,
        #[serde(default)]
        tail_tolerance: Option<f64>,
        #[serde(default)]
        target: Option<f64>,
        replicates: usize,
    },
    PdRecursion {
        s: f64,
        signature: MomentSignature,
        #[serde(default)]
        coefficient: RecursionCoefficient,
        #[serde(default)]
        tail_tolerance: Option<f64>,
        replicates: usize,
    },
    /// KS of `w_1` between the Poisson-process and stick-breaking samplers.
    PdSamplerAgreement {
        s: f64,
        n_atoms: usize,
        replicates: usize,
    },
    ValueDistribution {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        replicates: usize,
    },
    /// `P(R_12 = q_k)` against `1 - m_k`.
    PairCoincidence {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        replicates: usize,
    },
    /// Every case with `n` in `ns`: constant and pattern indicators, all
    /// levels.
    GgiBattery {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        ns: Vec<usize>,
        #[serde(default)]
        mode: GibbsAverage,
        replicates: usize,
    },
    GgiCase {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        n: usize,
        f: GgiFunction,
        psi_level: usize,
        #[serde(default)]
        mode: GibbsAverage,
        #[serde(default)]
        target: Option<f64>,
        replicates: usize,
    },
    Avoidance {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        ns: Vec<usize>,
        level: usize,
        replicates: usize,
    },
    DeltaMoment {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        n: usize,
        order: usize,
        f: GgiFunction,
        #[serde(default)]
        averaging: MarkAveraging,
        #[serde(default)]
        target: Option<f64>,
        replicates: usize,
    },
    Invariance {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        tilt: TiltSpec,
        /// Restrict the records to these statistics.
        #[serde(default)]
        statistics: Option<Vec<String>>,
        replicates: usize,
    },
    PdTiltInvariance {
        s: f64,
        tilt: TiltSpec,
        #[serde(default)]
        tail_tolerance: Option<f64>,
        replicates: usize,
    },
    TiltedMarks {
        s: f64,
        t: f64,
        prefix: usize,
        replicates: usize,
    },
    Exchangeability {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        /// One-based permutation of the ranks `1..=n`.
        permutation: Vec<usize>,
        replicates: usize,
    },
    Ultrametricity {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        n: usize,
        samples: usize,
    },
    Truncation {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        n: usize,
        samples: usize,
    },
    /// Smallest eigenvalue of a given level matrix mapped to values.
    Psd {
        #[serde(default)]
        grid: Option<QGrid>,
        levels: Vec<Vec<usize>>,
        #[serde(default)]
        diagonal: Diagonal,
        #[serde(default)]
        expected_min: Option<f64>,
    },
    Reconstruction {
        #[serde(default)]
        grid: Option<QGrid>,
        weights: Vec<f64>,
        levels: Vec<Vec<usize>>,
        ns: Vec<usize>,
        trials: usize,
        #[serde(default = "default_error_tolerance")]
        error_tolerance: f64,
        #[serde(default = "default_coverage")]
        coverage: f64,
        #[serde(default = "default_recovery")]
        recovery: f64,
    },
    Positivity {
        #[serde(default)]
        grid: Option<QGrid>,
        #[serde(default)]
        source: SourceSpec,
        n: usize,
        samples: usize,
    },
}

fn default_error_tolerance() -> f64 {
    0.02
}

fn default_coverage() -> f64 {
    0.95
}

fn default_recovery() -> f64 {
    0.99
}

fn batched(replicates: usize) -> Result<()> {
    if replicates < BATCHES || replicates % BATCHES != 0 {
        return Err(Error::Config(format!("replicates = {replicates} must be a positive multiple of {BATCHES}")));
    }
    Ok(())
}

fn positive(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{what} must be positive")));
    }
    Ok(())
}

impl TestKind {
    /// The grid the test runs on, if it uses one.
    pub fn grid<'a>(&'a self, suite: Option<&'a QGrid>) -> Result<Option<&'a QGrid>> {
        use TestKind::*;
        let own = match self {
            PdMoment { .. } | PdRecursion { .. } | PdSamplerAgreement { .. } | PdTiltInvariance { .. } | TiltedMarks { .. } => return Ok(None),
            ValueDistribution { grid, .. }
            | PairCoincidence { grid, .. }
            | GgiBattery { grid, .. }
            | GgiCase { grid, .. }
            | Avoidance { grid, .. }
            | DeltaMoment { grid, .. }
            | Invariance { grid, .. }
            | Exchangeability { grid, .. }
            | Ultrametricity { grid, .. }
            | Truncation { grid, .. }
            | Psd { grid, .. }
            | Reconstruction { grid, .. }
            | Positivity { grid, .. } => grid.as_ref(),
        };
        own.or(suite)
            .map(Some)
            .ok_or_else(|| Error::Config("test needs a grid and the suite declares none".into()))
    }

    pub fn source(&self) -> Option<&SourceSpec> {
        use TestKind::*;
        match self {
            ValueDistribution { source, .. }
            | PairCoincidence { source, .. }
            | GgiBattery { source, .. }
            | GgiCase { source, .. }
            | Avoidance { source, .. }
            | DeltaMoment { source, .. }
            | Invariance { source, .. }
            | Exchangeability { source, .. }
            | Ultrametricity { source, .. }
            | Truncation { source, .. }
            | Positivity { source, .. } => Some(source),
            _ => None,
        }
    }

    /// Checks every parameter without sampling.
    pub fn validate(&self, suite_grid: Option<&QGrid>) -> Result<()> {
        use TestKind::*;
        let grid = self.grid(suite_grid)?;
        if let (Some(src), Some(g)) = (self.source(), grid) {
            src.build(g)?;
        }
        let k = grid.map_or(0, |g| g.k());
        match self {
            PdMoment {
                s,
                sampler,
                n_atoms,
                tail_tolerance,
                replicates,
                ..
            } => {
                batched(*replicates)?;
                match sampler {
                    SamplerKind::PoissonProcess => {
                        PdParams::with_tolerance(*s, tail_tolerance.unwrap_or(DEFAULT_TAIL_TOLERANCE), DEFAULT_MAX_ATOMS)?;
                    }
                    SamplerKind::StickBreaking => {
                        if !(*s > 0.0 && *s < 1.0) {
                            return Err(Error::Config(format!("stick breaking needs 0 < s < 1, got {s}")));
                        }
                        positive("n_atoms", n_atoms.ok_or_else(|| Error::Config("stick breaking needs n_atoms".into()))?)?;
                    }
                }
            }
            PdRecursion {
                s,
                tail_tolerance,
                replicates,
                ..
            } => {
                batched(*replicates)?;
                PdParams::with_tolerance(*s, tail_tolerance.unwrap_or(DEFAULT_TAIL_TOLERANCE), DEFAULT_MAX_ATOMS)?;
            }
            PdSamplerAgreement { s, n_atoms, replicates } => {
                PdParams::new(*s)?;
                positive("n_atoms", *n_atoms)?;
                positive("replicates", *replicates)?;
            }
            ValueDistribution { replicates, .. } => {
                if *replicates < 1000 {
                    return Err(Error::Config("value distribution needs at least 1000 replicates".into()));
                }
            }
            PairCoincidence { replicates, .. } => batched(*replicates)?,
            GgiBattery { ns, replicates, .. } => {
                batched(*replicates)?;
                if ns.is_empty() || ns.iter().any(|&n| !(2..=6).contains(&n)) {
                    return Err(Error::Config("GGI battery needs n in 2..=6".into()));
                }
            }
            GgiCase {
                n,
                f,
                psi_level,
                mode,
                replicates,
                ..
            } => {
                if !(*mode == GibbsAverage::Exact && *replicates == 1) {
                    batched(*replicates)?;
                }
                crate::ggi::GgiCase::new(*n, f.clone(), Level::new(*psi_level, k)?)?;
            }
            Avoidance { ns, level, replicates, .. } => {
                batched(*replicates)?;
                Level::new(*level, k)?;
                if ns.is_empty() || ns.contains(&0) {
                    return Err(Error::Config("avoidance needs n >= 1".into()));
                }
            }
            DeltaMoment { n, order, f, replicates, .. } => {
                batched(*replicates)?;
                crate::ggi::DeltaSpec::new(*n, *order, f.clone())?;
            }
            Invariance { replicates, tilt, .. } => {
                batched(*replicates)?;
                TiltSpec::new(tilt.kind, tilt.t)?;
            }
            PdTiltInvariance {
                s,
                tilt,
                tail_tolerance,
                replicates,
            } => {
                batched(*replicates)?;
                PdParams::with_tolerance(*s, tail_tolerance.unwrap_or(DEFAULT_TAIL_TOLERANCE), DEFAULT_MAX_ATOMS)?;
                TiltSpec::new(tilt.kind, tilt.t)?;
            }
            TiltedMarks { s, t, prefix, replicates } => {
                batched(*replicates)?;
                PdParams::new(*s)?;
                TiltSpec::new(crate::invariance::MarkKind::Gaussian, *t)?;
                positive("prefix", *prefix)?;
            }
            Exchangeability { permutation, replicates, .. } => {
                positive("replicates", *replicates)?;
                zero_based(permutation)?;
            }
            Ultrametricity { n, samples, .. } | Truncation { n, samples, .. } | Positivity { n, samples, .. } => {
                positive("samples", *samples)?;
                if *n < 2 {
                    return Err(Error::Config("matrices need n >= 2".into()));
                }
                if matches!(self, Truncation { .. }) && k < 2 {
                    return Err(Error::Config("truncation needs k >= 2".into()));
                }
            }
            Psd { levels, .. } => {
                LevelMatrix::from_rows(levels, k)?;
            }
            Reconstruction {
                weights,
                levels,
                ns,
                trials,
                ..
            } => {
                DirectingMeasure::explicit(weights.clone(), LevelMatrix::from_rows(levels, k)?, grid.unwrap().clone())?;
                positive("trials", *trials)?;
                if ns.is_empty() || ns.contains(&0) {
                    return Err(Error::Config("reconstruction needs sample sizes >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// One-based permutation to zero-based.
pub fn zero_based(permutation: &[usize]) -> Result<Vec<usize>> {
    let n = permutation.len();
    let mut seen = vec![false; n];
    for &p in permutation {
        if p == 0 || p > n || std::mem::replace(&mut seen[p - 1], true) {
            return Err(Error::Config(format!("{permutation:?} is not a permutation of 1..={n}")));
        }
    }
    Ok(permutation.iter().map(|p| p - 1).collect())
}

impl SuiteConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SuiteConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::Config(format!("significance {} must lie in (0, 1)", self.significance)));
        }
        let mut names = std::collections::HashSet::new();
        for t in &self.tests {
            if !names.insert(t.name.as_str()) {
                return Err(Error::Config(format!("duplicate test name {:?}", t.name)));
            }
            t.test
                .validate(self.grid.as_ref())
                .map_err(|e| Error::Config(format!("test {:?}: {e}", t.name)))?;
        }
        Ok(())
    }

    /// Overrides the seed and, for every test that samples with a
    /// replicate count, the count.
    pub fn with_overrides(mut self, seed: Option<u64>, replicates: Option<usize>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(r) = replicates {
            for t in &mut self.tests {
                use TestKind::*;
                match &mut t.test {
                    PdMoment { replicates, .. }
                    | PdRecursion { replicates, .. }
                    | PdSamplerAgreement { replicates, .. }
                    | ValueDistribution { replicates, .. }
                    | PairCoincidence { replicates, .. }
                    | GgiBattery { replicates, .. }
                    | GgiCase { replicates, .. }
                    | Avoidance { replicates, .. }
                    | DeltaMoment { replicates, .. }
                    | Invariance { replicates, .. }
                    | PdTiltInvariance { replicates, .. }
                    | TiltedMarks { replicates, .. }
                    | Exchangeability { replicates, .. } => *replicates = r,
                    Ultrametricity { samples, .. } | Truncation { samples, .. } | Positivity { samples, .. } => *samples = r,
                    Psd { .. } | Reconstruction { .. } => {}
                }
            }
        }
        self.validate()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_fields_and_bad_values() {
        let ok = r#"{"name":"x","seed":1,"tests":[]}"#;
        assert!(SuiteConfig::from_json(ok).is_ok());
        assert!(SuiteConfig::from_json(r#"{"name":"x","seed":1,"bogus":2}"#).is_err());
        let bad_reps = r#"{"name":"x","seed":1,"tests":[{"name":"a","test":{"pd-recursion":{"s":0.5,"signature":[1],"replicates":150}}}]}"#;
        assert!(matches!(SuiteConfig::from_json(bad_reps), Err(Error::Config(_))));
        let no_grid = r#"{"name":"x","seed":1,"tests":[{"name":"a","test":{"pair-coincidence":{"replicates":100}}}]}"#;
        assert!(SuiteConfig::from_json(no_grid).is_err());
        let dup = r#"{"name":"x","seed":1,"tests":[
            {"name":"a","test":{"pd-recursion":{"s":0.5,"signature":[1],"replicates":100}}},
            {"name":"a","test":{"pd-recursion":{"s":0.5,"signature":[1],"replicates":100}}}]}"#;
        assert!(SuiteConfig::from_json(dup).is_err());
    }

    #[test]
    fn permutations_are_one_based() {
        assert_eq!(zero_based(&[2, 3, 1]).unwrap(), vec![1, 2, 0]);
        assert!(zero_based(&[0, 1]).is_err());
        assert!(zero_based(&[1, 1]).is_err());
    }
}
