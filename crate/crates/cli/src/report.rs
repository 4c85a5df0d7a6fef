use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    /// actual ≤ expected + tol
    AtMost,
    /// actual ≥ expected − tol
    AtLeast,
    /// |actual − expected| ≤ tol
    Equal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub relation: Relation,
    pub expected: f64,
    pub actual: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Relation {
    pub fn symbol(self) -> &'static str {
        match self {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
            Relation::Equal => "==",
        }
    }
}

impl Assertion {
    pub fn new(name: impl Into<String>, relation: Relation, actual: f64, expected: f64, tol: f64) -> Self {
        let pass = match relation {
            Relation::AtMost => actual <= expected + tol,
            Relation::AtLeast => actual >= expected - tol,
            Relation::Equal => (actual - expected).abs() <= tol,
        };
        Assertion { name: name.into(), relation, expected, actual, tol, pass }
    }

    pub fn at_most(name: impl Into<String>, actual: f64, bound: f64) -> Self {
        Self::new(name, Relation::AtMost, actual, bound, 0.0)
    }

    pub fn at_least(name: impl Into<String>, actual: f64, bound: f64) -> Self {
        Self::new(name, Relation::AtLeast, actual, bound, 0.0)
    }

    pub fn equal(name: impl Into<String>, actual: f64, expected: f64) -> Self {
        Self::new(name, Relation::Equal, actual, expected, 0.0)
    }
}

/// One line of results.csv. `x` is the sweep key (step, β, depth, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub x: f64,
    pub metric: String,
    pub value: f64,
}

impl Row {
    pub fn new(x: f64, metric: impl Into<String>, value: f64) -> Self {
        Row { x, metric: metric.into(), value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub experiment: String,
    pub pass: bool,
    pub config_echo: Value,
    pub metrics: BTreeMap<String, f64>,
    pub assertions: Vec<Assertion>,
    pub wall_time_s: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("experiment produced no results")]
    NoResults,
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn emit_report(
    experiment: &str,
    config_echo: Value,
    rows: &[Row],
    metrics: BTreeMap<String, f64>,
    assertions: Vec<Assertion>,
    wall_time_s: f64,
) -> Result<Report, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::NoResults);
    }
    let pass = assertions.iter().all(|a| a.pass);
    Ok(Report { schema_version: SCHEMA_VERSION, experiment: experiment.into(), pass, config_echo, metrics, assertions, wall_time_s })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.display().to_string(), source }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn write_csv(path: &Path, experiment: &str, rows: &[Row]) -> Result<(), ReportError> {
    let mut buf = String::from("experiment,x,metric,value\n");
    for r in rows {
        buf.push_str(&format!("{},{:?},{},{:?}\n", csv_field(experiment), r.x, csv_field(&r.metric), r.value));
    }
    std::fs::write(path, buf).map_err(io_err(path))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ReportError> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| ReportError::Io { path: path.display().to_string(), source: e.into() })?;
    f.write_all(b"\n").map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relations() {
        assert!(Assertion::at_most("a", 1.0, 1.0).pass);
        assert!(!Assertion::at_most("a", 1.1, 1.0).pass);
        assert!(Assertion::new("a", Relation::AtMost, 1.0 + 1e-10, 1.0, 1e-9).pass);
        assert!(Assertion::at_least("a", 0.99, 0.99).pass);
        assert!(!Assertion::equal("a", 2.0, 1.0).pass);
        assert!(!Assertion::at_most("nan", f64::NAN, 1.0).pass);
    }

    #[test]
    fn empty_results_are_rejected() {
        let r = emit_report("x", Value::Null, &[], BTreeMap::new(), vec![], 0.0);
        assert!(matches!(r, Err(ReportError::NoResults)));
    }

    #[test]
    fn one_failure_fails_the_report() {
        let rows = [Row::new(0.0, "m", 1.0)];
        let asserts = vec![Assertion::at_most("ok", 0.0, 1.0), Assertion::at_most("bad", 2.0, 1.0)];
        let r = emit_report("x", Value::Null, &rows, BTreeMap::new(), asserts, 0.0).unwrap();
        assert!(!r.pass);
        assert_eq!(r.assertions.iter().filter(|a| !a.pass).count(), 1);
    }
}
