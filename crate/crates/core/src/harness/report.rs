//! Suite reports: per-record estimates and the family-wise verdict.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Identity names a record may cite as its anchor.
pub const ANCHORS: &[&str] = &[
    "avoidance-closed-form",
    "cascade-pair-coincidence",
    "delta-moments",
    "ggi",
    "nonnegative-definiteness",
    "overlap-value-law",
    "pd-moments",
    "pd-poisson-process",
    "pd-recursion",
    "pd-tilt-invariance",
    "positivity",
    "reconstruction",
    "tilt-invariance",
    "tilted-gaussian-marks",
    "truncation",
    "ultrametricity",
    "weak-exchangeability",
];

/// A single statistic or exact check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub name: String,
    pub anchor: String,
    pub estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    /// Exact checks carry 1 when they hold and 0 otherwise.
    pub p_value: f64,
    pub exact: bool,
    pub rejected: bool,
}

impl Record {
    pub fn statistical(name: impl Into<String>, anchor: &str, estimate: f64, target: Option<f64>, se: Option<f64>, z: Option<f64>, p_value: f64) -> Self {
        Record {
            name: name.into(),
            anchor: anchor.into(),
            estimate,
            target,
            se,
            z,
            p_value,
            exact: false,
            rejected: false,
        }
    }

    pub fn exact(name: impl Into<String>, anchor: &str, estimate: f64, target: Option<f64>, holds: bool) -> Self {
        Record {
            name: name.into(),
            anchor: anchor.into(),
            estimate,
            target,
            se: None,
            z: None,
            p_value: if holds { 1.0 } else { 0.0 },
            exact: true,
            rejected: !holds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub name: String,
    pub expect_reject: bool,
    /// Some record rejected.
    pub rejected: bool,
    /// `rejected == expect_reject`, or the test is diagnostic only.
    pub pass: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub diagnostic: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<TestError>,
    pub records: Vec<Record>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    ResourceCap,
    InvalidInput,
    InsufficientData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestError {
    pub kind: ErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub significance: f64,
    pub correction: String,
    /// Number of statistical records the significance is split over.
    pub comparisons: usize,
    pub threshold: f64,
    pub all_pass: bool,
    pub tests: Vec<TestResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl SuiteReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn records(&self) -> impl Iterator<Item = (&TestResult, &Record)> {
        self.tests.iter().flat_map(|t| t.records.iter().map(move |r| (t, r)))
    }

    pub fn failures(&self) -> impl Iterator<Item = &TestResult> {
        self.tests.iter().filter(|t| !t.pass)
    }

    pub fn worst_error(&self) -> Option<ErrorKind> {
        let kinds: Vec<ErrorKind> = self.tests.iter().filter_map(|t| t.error.as_ref().map(|e| e.kind)).collect();
        [ErrorKind::ResourceCap, ErrorKind::InvalidInput, ErrorKind::InsufficientData]
            .into_iter()
            .find(|k| kinds.contains(k))
    }

    /// One line per record.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "test,record,anchor,estimate,target,se,z,p_value,rejected,expect_reject,test_pass")?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for (t, r) in self.records() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                csv_field(&t.name),
                csv_field(&r.name),
                r.anchor,
                r.estimate,
                opt(r.target),
                opt(r.se),
                opt(r.z),
                r.p_value,
                r.rejected,
                t.expect_reject,
                t.pass
            )?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_commas() {
        let report = SuiteReport {
            suite: "s".into(),
            seed: 1,
            significance: 0.01,
            correction: "bonferroni".into(),
            comparisons: 1,
            threshold: 0.01,
            all_pass: true,
            tests: vec![TestResult {
                name: "a,b".into(),
                expect_reject: false,
                rejected: false,
                pass: true,
                diagnostic: false,
                error: None,
                records: vec![Record::exact("r", "ggi", 0.0, Some(0.0), true)],
                warnings: vec![],
            }],
            wall_clock_seconds: None,
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "\"a,b\",r,ggi,0,0,,,1,false,false,true");
        assert_eq!(SuiteReport::from_json(&report.to_json().unwrap()).unwrap(), report);
    }
}
