//! Run reports and their CSV / JSON / snapshot outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampler::{Snapshot, StepRecord};

/// How a metric is judged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "op", content = "bound", rename_all = "kebab-case")]
pub enum Check {
    Le(f64),
    Lt(f64),
    Ge(f64),
    Gt(f64),
    /// Reported only.
    Info,
}

impl Check {
    pub fn passes(self, v: f64) -> Option<bool> {
        match self {
            Check::Le(t) => Some(v <= t),
            Check::Lt(t) => Some(v < t),
            Check::Ge(t) => Some(v >= t),
            Check::Gt(t) => Some(v > t),
            Check::Info => None,
        }
    }

    fn describe(self) -> String {
        match self {
            Check::Le(t) => format!("<= {t:e}"),
            Check::Lt(t) => format!("< {t:e}"),
            Check::Ge(t) => format!(">= {t:e}"),
            Check::Gt(t) => format!("> {t:e}"),
            Check::Info => String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub check: Check,
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            config_hash,
            seed,
            version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }
}

/// Snapshots of one sampler run, written to `snapshots/<name>.csv`.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub name: String,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub metrics: Vec<Metric>,
    /// Per-step records of a representative sampler run.
    pub steps: Vec<StepRecord>,
    /// Scenario-specific detail records.
    pub details: serde_json::Value,
    pub provenance: Provenance,
    #[serde(skip)]
    pub snapshots: Vec<SnapshotSet>,
}

impl RunReport {
    pub fn new(scenario: &str, provenance: Provenance) -> Self {
        Self {
            scenario: scenario.to_string(),
            metrics: Vec::new(),
            steps: Vec::new(),
            details: serde_json::Value::Null,
            provenance,
            snapshots: Vec::new(),
        }
    }

    /// Adds a metric; non-finite values are rejected.
    pub fn push(&mut self, name: &str, value: f64, check: Check) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::invalid(format!("metric {name} is not finite: {value}")));
        }
        self.metrics.push(Metric {
            name: name.to_string(),
            value,
            check,
            pass: check.passes(value),
        });
        Ok(())
    }

    pub fn info(&mut self, name: &str, value: f64) -> Result<()> {
        self.push(name, value, Check::Info)
    }

    /// Records a yes/no outcome as 1 or 0 that must equal 1.
    pub fn flag(&mut self, name: &str, ok: bool) -> Result<()> {
        self.push(name, if ok { 1.0 } else { 0.0 }, Check::Ge(1.0))
    }

    pub fn passed(&self) -> bool {
        self.metrics.iter().all(|m| m.pass != Some(false))
    }

    pub fn failures(&self) -> Vec<&Metric> {
        self.metrics.iter().filter(|m| m.pass == Some(false)).collect()
    }

    pub fn metric(&self, name: &str) -> Option<&Metric> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

/// `scenario,metric,value,tolerance,pass` rows for all reports.
pub fn to_csv(reports: &[RunReport]) -> String {
    let mut out = String::from("scenario,metric,value,tolerance,pass\n");
    for r in reports {
        for m in &r.metrics {
            let pass = match m.pass {
                Some(true) => "true",
                Some(false) => "false",
                None => "info",
            };
            let _ = writeln!(out, "{},{},{:e},{},{}", r.scenario, m.name, m.value, m.check.describe(), pass);
        }
    }
    out
}

pub fn to_json(reports: &[RunReport]) -> Result<String> {
    Ok(serde_json::to_string_pretty(reports)?)
}

/// Long-format snapshot table, one row per coordinate.
pub fn snapshots_csv(snapshots: &[Snapshot]) -> String {
    let mut out = String::from("step,repeat,sigma,entry,view,frame,coord,state,row_prediction,col_prediction\n");
    for s in snapshots {
        let l = s.state.layout();
        for e in l.entries() {
            for k in 0..l.entry_dim {
                let f = l.flat(e, k);
                let _ = writeln!(
                    out,
                    "{},{},{:e},{},{},{},{},{:e},{:e},{:e}",
                    s.step,
                    s.repeat,
                    s.sigma,
                    l.entry_index(e),
                    e.0,
                    e.1,
                    k,
                    s.state.as_slice()[f],
                    s.row_prediction.as_slice()[f],
                    s.col_prediction.as_slice()[f],
                );
            }
        }
    }
    out
}

/// Writes `report.csv`, `report.json`, and any snapshot tables under `dir`.
pub fn write_reports(dir: &Path, reports: &[RunReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), to_csv(reports))?;
    fs::write(dir.join("report.json"), to_json(reports)?)?;
    for r in reports {
        if r.snapshots.is_empty() {
            continue;
        }
        let sdir = dir.join("snapshots");
        fs::create_dir_all(&sdir)?;
        for set in &r.snapshots {
            fs::write(sdir.join(format!("{}.csv", set.name)), snapshots_csv(&set.snapshots))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> RunReport {
        let mut r = RunReport::new("demo", Provenance::new("ab".into(), 7));
        r.push("err", 1e-12, Check::Le(1e-8)).unwrap();
        r.push("gap", 0.5, Check::Gt(1.0)).unwrap();
        r.info("note", 3.0).unwrap();
        r
    }

    #[test]
    fn checks_and_failures() {
        let r = report();
        assert_eq!(r.metric("err").unwrap().pass, Some(true));
        assert_eq!(r.metric("gap").unwrap().pass, Some(false));
        assert_eq!(r.metric("note").unwrap().pass, None);
        assert!(!r.passed());
        assert_eq!(r.failures().len(), 1);
    }

    #[test]
    fn non_finite_metrics_rejected() {
        let mut r = report();
        assert!(r.info("bad", f64::NAN).is_err());
        assert!(r.push("bad", f64::INFINITY, Check::Le(1.0)).is_err());
    }

    #[test]
    fn csv_layout() {
        let csv = to_csv(&[report()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "scenario,metric,value,tolerance,pass");
        assert_eq!(lines[1], "demo,err,1e-12,<= 1e-8,true");
        assert_eq!(lines[2], "demo,gap,5e-1,> 1e0,false");
        assert_eq!(lines[3], "demo,note,3e0,,info");
    }

    #[test]
    fn json_has_provenance() {
        let v: serde_json::Value = serde_json::from_str(&to_json(&[report()]).unwrap()).unwrap();
        assert_eq!(v[0]["provenance"]["seed"], 7);
        assert_eq!(v[0]["metrics"][0]["check"]["op"], "le");
    }
}
