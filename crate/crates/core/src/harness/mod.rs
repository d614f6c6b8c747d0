//! End-to-end pipeline and the experiment families built on it.
//!
//! Every report is a pure function of `(config, seed)`; wall-clock time is
//! written to a sidecar file so report bytes stay comparable across reruns.

pub mod bias;
pub mod config;
pub mod edit;
pub mod logic;
pub mod pipeline;
pub mod sensitivity;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

pub use bias::{run_bias_diagnosis, BiasConfig};
pub use config::{HarnessConfig, OUT_DIR_ENV};
pub use edit::{Source, SubstitutionPlan};
pub use logic::{run_logic_consistency, LogicConfig};
pub use pipeline::{load_artifacts, run_pipeline, Artifacts, FidelityConfig, TEST_ID_OFFSET};
pub use sensitivity::{run_sensitivity, SensitivityConfig};

/// Progress sink; the CLI prints to stderr, tests pass a no-op.
pub type Log<'a> = &'a dyn Fn(&str);

pub fn quiet(_: &str) {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// Pass when `value >= threshold`.
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value >= threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    /// Enough to rerun the experiment.
    pub config: serde_json::Value,
    pub trials: Vec<serde_json::Value>,
    pub aggregates: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
    /// Display tables keyed by name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tables: BTreeMap<String, Vec<serde_json::Value>>,
    /// Conditions that make the result inconclusive or worth a look.
    pub flags: Vec<String>,
    pub passed: bool,
}

impl ExperimentReport {
    pub fn new(experiment: &str, seed: u64, config: &impl Serialize) -> Self {
        Self {
            experiment: experiment.into(),
            seed,
            config: serde_json::to_value(config).expect("config serializes"),
            trials: Vec::new(),
            aggregates: BTreeMap::new(),
            checks: Vec::new(),
            tables: BTreeMap::new(),
            flags: Vec::new(),
            passed: true,
        }
    }

    pub fn trial(&mut self, t: &impl Serialize) {
        self.trials.push(serde_json::to_value(t).expect("trial serializes"));
    }

    pub fn aggregate(&mut self, name: &str, v: f64) {
        self.aggregates.insert(name.into(), v);
    }

    pub fn table_row(&mut self, table: &str, row: &impl Serialize) {
        self.tables
            .entry(table.into())
            .or_default()
            .push(serde_json::to_value(row).expect("row serializes"));
    }

    pub fn check(&mut self, c: Check) {
        self.passed &= c.passed;
        self.checks.push(c);
    }

    pub fn flag(&mut self, msg: impl Into<String>) {
        self.flags.push(msg.into());
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Summary rows: every aggregate, then every check.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["kind", "name", "value", "threshold", "passed"])?;
        for (k, v) in &self.aggregates {
            w.write_record(["aggregate", k, &v.to_string(), "", ""])?;
        }
        for c in &self.checks {
            w.write_record(["check", &c.name, &c.value.to_string(), &c.threshold.to_string(), &c.passed.to_string()])?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Short content hash of the JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(&Sha256::digest(self.to_json()?.as_bytes())[..8]))
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{}: {}", self.experiment, if self.passed { "PASS" } else { "FAIL" });
        for c in &self.checks {
            s.push_str(&format!(
                "\n  {} {:.4} (≥ {}) {}",
                c.name,
                c.value,
                c.threshold,
                if c.passed { "ok" } else { "below threshold" }
            ));
        }
        for f in &self.flags {
            s.push_str(&format!("\n  flag: {f}"));
        }
        s
    }
}

#[derive(Serialize)]
struct Timing<'a> {
    experiment: &'a str,
    seconds: f64,
}

/// Writes `<name>.json` (or `.csv`) and a `<name>.timing.json` sidecar.
pub fn save_report(report: &ExperimentReport, dir: &Path, name: &str, csv: bool, seconds: f64) -> Result<()> {
    fs::create_dir_all(dir)?;
    if csv {
        fs::write(dir.join(format!("{name}.csv")), report.to_csv()?)?;
    } else {
        fs::write(dir.join(format!("{name}.json")), report.to_json()?)?;
    }
    let t = Timing {
        experiment: &report.experiment,
        seconds,
    };
    fs::write(dir.join(format!("{name}.timing.json")), serde_json::to_vec_pretty(&t)?)?;
    Ok(())
}

pub fn load_report(path: &Path) -> Result<ExperimentReport> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub(crate) fn rate(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
