//! Report assembly and emission: a metrics CSV with one row per seed and
//! condition, and a JSON document carrying everything including ROC points.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{conditions, ConditionResult, ExperimentSpec, Scenario};
use crate::error::{MiaError, Result};

pub const CSV_HEADER: &str = "scenario,condition,seed,accuracy,precision,recall,auc";
const FORMAT: &str = "mialab-report/1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        let median = if v.len() % 2 == 0 { 0.5 * (v[mid - 1] + v[mid]) } else { v[mid] };
        Self { median, min: v[0], max: v[v.len() - 1] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub condition: String,
    pub seeds: usize,
    pub accuracy: Summary,
    pub precision: Summary,
    pub recall: Summary,
    pub auc: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format: String,
    pub scenario: Scenario,
    pub spec: ExperimentSpec,
    /// Ordered by seed, then by condition.
    pub results: Vec<ConditionResult>,
    /// One entry per condition that produced at least one result.
    pub aggregates: Vec<Aggregate>,
    /// Not part of the CSV, so the CSV stays reproducible.
    pub wall_clock_secs: f64,
}

/// One parsed CSV line.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub scenario: String,
    pub condition: String,
    pub seed: u64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
}

impl ExperimentReport {
    pub(crate) fn new(spec: ExperimentSpec, results: Vec<ConditionResult>, wall_clock_secs: f64) -> Self {
        let order = conditions(&spec).unwrap_or_default();
        let aggregates = order
            .iter()
            .filter_map(|c| {
                let rows: Vec<&ConditionResult> = results.iter().filter(|r| &r.condition == c).collect();
                if rows.is_empty() {
                    return None;
                }
                let pick = |f: fn(&ConditionResult) -> f64| Summary::of(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                Some(Aggregate {
                    condition: c.clone(),
                    seeds: rows.len(),
                    accuracy: pick(|r| r.metrics.accuracy),
                    precision: pick(|r| r.metrics.precision),
                    recall: pick(|r| r.metrics.recall),
                    auc: pick(|r| r.auc),
                })
            })
            .collect();
        Self { format: FORMAT.into(), scenario: spec.scenario, spec, results, aggregates, wall_clock_secs }
    }

    /// The rows of one seed, with aggregates recomputed over them.
    pub fn only_seed(&self, seed: u64) -> Self {
        let rows = self.results.iter().filter(|r| r.seed == seed).cloned().collect();
        Self::new(self.spec.clone(), rows, self.wall_clock_secs)
    }

    pub fn aggregate(&self, condition: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.condition == condition)
    }

    /// Results of one condition in seed order.
    pub fn condition_results(&self, condition: &str) -> Vec<&ConditionResult> {
        self.results.iter().filter(|r| r.condition == condition).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.results {
            let m = &r.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.scenario.name(),
                r.condition,
                r.seed,
                m.accuracy,
                m.precision,
                m.recall,
                r.auc
            )
            .expect("write to string");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        if report.format != FORMAT {
            return Err(MiaError::Format(format!("expected format {FORMAT}, found {}", report.format)));
        }
        Ok(report)
    }

    /// Writes `report.csv` and `report.json` into `dir`, returning both paths.
    pub fn emit(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let csv = dir.join("report.csv");
        let json = dir.join("report.json");
        fs::write(&csv, self.to_csv())?;
        fs::write(&json, self.to_json()?)?;
        Ok((csv, json))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(MiaError::Format("missing or unexpected CSV header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || MiaError::Format(format!("CSV line {}: malformed row", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(CsvRow {
                scenario: f[0].into(),
                condition: f[1].into(),
                seed: f[2].parse().map_err(|_| bad())?,
                accuracy: num(f[3])?,
                precision: num(f[4])?,
                recall: num(f[5])?,
                auc: num(f[6])?,
            })
        })
        .collect()
}
