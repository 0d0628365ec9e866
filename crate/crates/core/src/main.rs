use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use overlap_lab::cascade::{Cascade, CascadeParams};
use overlap_lab::ggi::GibbsAverage;
use overlap_lab::harness::config::{MeasureConfig, SourceSpec, TestKind, TestSpec};
use overlap_lab::harness::rng::{map_replicates, StreamKey};
use overlap_lab::harness::{run_suite, SuiteConfig, SuiteReport};
use overlap_lab::invariance::{MarkKind, TiltSpec};
use overlap_lab::overlap::{Diagonal, LevelMatrix, QGrid, WeightSeq};
use overlap_lab::pd::{sample_pd, PdParams, DEFAULT_TAIL_TOLERANCE};
use overlap_lab::ultrametric::{check_ultrametric, reconstruct};
use overlap_lab::{Error, Result};

#[derive(Parser)]
#[command(name = "overlap-lab", version, about = "Poisson-Dirichlet weights, Ruelle cascades and overlap identity checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

/// Grid and source, from `--config` or inline `--q`/`--m`.
#[derive(Args)]
struct MeasureArgs {
    /// JSON file with `grid` and optional `source`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overlap values, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "config")]
    q: Vec<f64>,
    /// Cumulative masses m_1..m_{k+1}, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "config")]
    m: Vec<f64>,
}

impl MeasureArgs {
    fn load(&self) -> Result<MeasureConfig> {
        match &self.config {
            Some(p) => MeasureConfig::load(p),
            None if self.q.is_empty() => Err(Error::Config("give --config or --q and --m".into())),
            None => Ok(MeasureConfig {
                grid: QGrid::new(self.q.clone(), self.m.clone())?,
                source: SourceSpec::Cascade,
            }),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw PD(s) weight sequences.
    SamplePd {
        /// PD parameter in (0, 1).
        #[arg(long)]
        s: f64,
        #[arg(long, default_value_t = DEFAULT_TAIL_TOLERANCE)]
        tail_tolerance: f64,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Build and materialize one cascade.
    BuildCascade {
        #[command(flatten)]
        measure: MeasureArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Sample replica overlap matrices.
    SampleOverlaps {
        #[command(flatten)]
        measure: MeasureArgs,
        /// Replicas per matrix.
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        /// Write overlap values instead of levels (CSV only).
        #[arg(long)]
        values: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Run the GGI battery.
    VerifyGgi {
        #[command(flatten)]
        measure: MeasureArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [2, 3, 4])]
        ns: Vec<usize>,
        #[arg(long, default_value_t = 100_000)]
        replicates: usize,
        /// Enumerate all atom tuples instead of sampling replicas (small explicit measures).
        #[arg(long)]
        exact: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Compare tilted and untilted measures.
    VerifyInvariance {
        #[command(flatten)]
        measure: MeasureArgs,
        #[arg(long, value_enum, default_value_t = Marks::Gaussian)]
        kind: Marks,
        /// Tilt strength.
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 10_000)]
        replicates: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Check a level matrix (CSV) for ultrametricity.
    CheckUltrametric {
        /// Level matrix CSV, one row per line.
        #[arg(long)]
        input: PathBuf,
        /// Number of levels.
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Recover class weights and overlaps from a level matrix (CSV).
    Reconstruct {
        /// Level matrix CSV, one row per line.
        #[arg(long)]
        input: PathBuf,
        /// Number of levels.
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Run a suite configuration.
    RunSuite {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override every test's replicate count.
        #[arg(long)]
        replicates: Option<usize>,
        /// Worker threads (all cores when absent).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Marks {
    Rademacher,
    Gaussian,
}

fn output(out: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: Serialize>(value: &T, out: &Option<PathBuf>) -> Result<()> {
    let mut w = output(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_report(report: &SuiteReport, format: Format, out: &Option<PathBuf>) -> Result<()> {
    match format {
        Format::Json => {
            let mut w = output(out)?;
            w.write_all(report.to_json()?.as_bytes())?;
            w.flush()?;
        }
        Format::Csv => {
            let mut w = output(out)?;
            report.write_csv(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn report_code(report: &SuiteReport) -> ExitCode {
    use overlap_lab::harness::report::ErrorKind;
    match report.worst_error() {
        Some(ErrorKind::ResourceCap) => ExitCode::from(3),
        Some(ErrorKind::InvalidInput) => ExitCode::from(2),
        _ if report.all_pass => ExitCode::SUCCESS,
        _ => ExitCode::from(1),
    }
}

fn single_test(name: &str, seed: u64, grid: QGrid, test: TestKind) -> SuiteConfig {
    SuiteConfig {
        name: name.into(),
        seed,
        significance: overlap_lab::harness::config::DEFAULT_SIGNIFICANCE,
        grid: Some(grid),
        include_timing: false,
        output: Default::default(),
        tests: vec![TestSpec {
            name: name.into(),
            expect_reject: false,
            test,
        }],
    }
}

fn read_matrix(path: &Path, k: usize) -> Result<LevelMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    LevelMatrix::read_levels_csv(&text, k)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::SamplePd {
            s,
            tail_tolerance,
            replicates,
            common,
        } => {
            let params = PdParams::with_tolerance(s, tail_tolerance, overlap_lab::pd::DEFAULT_MAX_ATOMS)?;
            let draws: Vec<WeightSeq> = map_replicates(StreamKey::new(common.seed).named("sample-pd"), replicates, |_, rng| sample_pd(&params, rng))
                .into_iter()
                .collect::<Result<_>>()?;
            match common.format {
                Format::Json => write_json(&draws, &common.out)?,
                Format::Csv => {
                    let mut w = output(&common.out)?;
                    writeln!(w, "replicate,rank,weight,tail_mass")?;
                    for (r, d) in draws.iter().enumerate() {
                        for (i, x) in d.weights().iter().enumerate() {
                            writeln!(w, "{r},{},{x},{}", i + 1, d.tail_mass())?;
                        }
                    }
                    w.flush()?;
                }
            }
        }
        Command::BuildCascade { measure, common } => {
            let cfg = measure.load()?;
            let mut c = Cascade::new(CascadeParams::new(cfg.grid.clone(), common.seed))?;
            let m = c.materialize()?;
            match common.format {
                Format::Json => write_json(&c.document(), &common.out)?,
                Format::Csv => {
                    let mut w = output(&common.out)?;
                    m.atom_overlaps().write_levels_csv(&mut w)?;
                    w.flush()?;
                }
            }
        }
        Command::SampleOverlaps {
            measure,
            n,
            replicates,
            values,
            common,
        } => {
            let cfg = measure.load()?;
            let src = cfg.source.build(&cfg.grid)?;
            let samples: Vec<LevelMatrix> = map_replicates(StreamKey::new(common.seed).named("sample-overlaps"), replicates, |_, rng| {
                src.sample_replicas(n, rng).map(|s| s.overlaps)
            })
            .into_iter()
            .collect::<Result<_>>()?;
            match common.format {
                Format::Json => write_json(&samples, &common.out)?,
                Format::Csv => {
                    let mut w = output(&common.out)?;
                    for (i, m) in samples.iter().enumerate() {
                        if i > 0 {
                            writeln!(w)?;
                        }
                        if values {
                            m.write_values_csv(&cfg.grid, Diagonal::TopLevel, &mut w)?;
                        } else {
                            m.write_levels_csv(&mut w)?;
                        }
                    }
                    w.flush()?;
                }
            }
        }
        Command::VerifyGgi {
            measure,
            ns,
            replicates,
            exact,
            common,
        } => {
            let cfg = measure.load()?;
            let test = TestKind::GgiBattery {
                grid: None,
                source: cfg.source,
                ns,
                mode: if exact { GibbsAverage::Exact } else { GibbsAverage::Sampled },
                replicates,
            };
            let report = run_suite(&single_test("verify-ggi", common.seed, cfg.grid, test), None)?;
            write_report(&report, common.format, &common.out)?;
            return Ok(report_code(&report));
        }
        Command::VerifyInvariance {
            measure,
            kind,
            t,
            replicates,
            common,
        } => {
            let cfg = measure.load()?;
            let kind = match kind {
                Marks::Rademacher => MarkKind::Rademacher,
                Marks::Gaussian => MarkKind::Gaussian,
            };
            let test = TestKind::Invariance {
                grid: None,
                source: cfg.source,
                tilt: TiltSpec::new(kind, t)?,
                statistics: None,
                replicates,
            };
            let report = run_suite(&single_test("verify-invariance", common.seed, cfg.grid, test), None)?;
            write_report(&report, common.format, &common.out)?;
            return Ok(report_code(&report));
        }
        Command::CheckUltrametric { input, k, common } => {
            let r = check_ultrametric(&read_matrix(&input, k)?);
            match common.format {
                Format::Json => write_json(&r, &common.out)?,
                Format::Csv => {
                    let mut w = output(&common.out)?;
                    writeln!(w, "i,j,l")?;
                    for (i, j, l) in &r.triples {
                        writeln!(w, "{},{},{}", i + 1, j + 1, l + 1)?;
                    }
                    w.flush()?;
                }
            }
            if !r.is_ultrametric() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Reconstruct { input, k, common } => {
            let r = reconstruct(&read_matrix(&input, k)?);
            match common.format {
                Format::Json => write_json(&r, &common.out)?,
                Format::Csv => {
                    let mut w = output(&common.out)?;
                    if let Some(m) = &r.class_overlaps {
                        m.write_levels_csv(&mut w)?;
                    }
                    w.flush()?;
                }
            }
            if r.degenerate {
                return Ok(ExitCode::from(1));
            }
        }
        Command::RunSuite {
            config,
            seed,
            replicates,
            workers,
            out,
            format,
        } => {
            let cfg = SuiteConfig::load(&config)?.with_overrides(seed, replicates)?;
            let report = run_suite(&cfg, workers)?;
            if out.is_some() || (cfg.output.report.is_none() && cfg.output.csv.is_none()) {
                write_report(&report, format, &out)?;
            } else {
                if let Some(p) = &cfg.output.report {
                    write_report(&report, Format::Json, &Some(p.clone()))?;
                }
                if let Some(p) = &cfg.output.csv {
                    write_report(&report, Format::Csv, &Some(p.clone()))?;
                }
            }
            return Ok(report_code(&report));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::ResourceCap(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
