//! Config-driven scenarios with thresholded metrics and hashed artifacts.
//!
//! A scenario is a TOML document:
//!
//! ```toml
//! schema_version = 1
//! name = "torus_kuznecov"
//! claim = "period-integral counts of a closed geodesic on the flat torus"
//! seed = 1
//!
//! [model]
//! name = "flat_torus"
//!
//! [sigma]
//! kind = "torus_line"
//! value = 0.0
//! period = 6.283185307179586
//! sheet_period = 6.283185307179586
//!
//! [[pipeline]]
//! op = "kuznecov_torus"
//! lambda_max = 500.0
//!
//! [[thresholds]]
//! metric = "c_fit"
//! min = 1.96
//! max = 2.04
//! ```
//!
//! Running it writes `<out>/<name>/` with the op artifacts (CSV/JSON),
//! `scenario.toml` (the resolved config), `report.json` and `summary.txt`.

pub mod builtin;
pub mod fold;
pub mod ops;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use builtin::{builtin, list_builtin};
pub use ops::OpSpec;

use crate::charts::{ManifoldModel, MetricChart, ModelSpec};
use crate::conormal::{SigmaSpec, Submanifold};
use crate::error::{LabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    pub name: String,
    /// One-line statement of what the scenario checks; copied into the report header.
    pub claim: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<SigmaSpec>,
    pub pipeline: Vec<OpSpec>,
    #[serde(default)]
    pub thresholds: Vec<Threshold>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Threshold {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl Threshold {
    pub fn accepts(&self, v: f64) -> bool {
        !v.is_nan() && self.min.is_none_or(|m| v >= m) && self.max.is_none_or(|m| v <= m)
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.name.is_empty() || !self.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return bad(format!("name `{}` must be non-empty and use [A-Za-z0-9_-]", self.name));
        }
        if self.pipeline.is_empty() {
            return bad("pipeline is empty".into());
        }
        for t in &self.thresholds {
            if t.min.is_none() && t.max.is_none() {
                return bad(format!("threshold on `{}` has neither min nor max", t.metric));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the config.
    pub fn config_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Model and Σ shared by the ops of one scenario.
pub(crate) struct Context {
    pub seed: u64,
    pub model: Option<ManifoldModel>,
    pub sigma_spec: Option<SigmaSpec>,
    pub sigma: Option<Arc<dyn Submanifold>>,
}

impl Context {
    fn new(s: &Scenario) -> Result<Self> {
        Ok(Self {
            seed: s.seed,
            model: s.model.as_ref().map(|m| m.build()).transpose()?,
            sigma_spec: s.sigma.clone(),
            sigma: s.sigma.as_ref().map(|s| s.build()),
        })
    }

    pub fn chart(&self, op: &str) -> Result<&MetricChart> {
        self.model
            .as_ref()
            .map(|m| &m.chart)
            .ok_or_else(|| LabError::Config(format!("op `{op}` needs a [model] section")))
    }

    pub fn sigma(&self, op: &str) -> Result<(&SigmaSpec, &dyn Submanifold)> {
        match (&self.sigma_spec, &self.sigma) {
            (Some(spec), Some(s)) => Ok((spec, s.as_ref())),
            _ => Err(LabError::Config(format!("op `{op}` needs a [sigma] section"))),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct OpOutput {
    pub metrics: Vec<(String, f64)>,
    pub artifacts: Vec<(String, String)>,
}

impl OpOutput {
    pub fn metric(&mut self, name: &str, v: f64) {
        self.metrics.push((name.to_string(), v));
    }

    pub fn flag(&mut self, name: &str, v: bool) {
        self.metric(name, if v { 1.0 } else { 0.0 });
    }

    pub fn artifact(&mut self, file: &str, contents: String) {
        self.artifacts.push((file.to_string(), contents));
    }

    pub fn json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.artifact(file, s);
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema_version: u32,
    pub name: String,
    pub claim: String,
    pub seed: u64,
    pub config_sha256: String,
    pub metrics: BTreeMap<String, f64>,
    pub verdicts: Vec<Verdict>,
    pub artifacts: Vec<Artifact>,
    pub pass: bool,
}

impl Report {
    pub fn summary(&self) -> String {
        let mut s = format!("scenario {}\nclaim: {}\nseed: {}\nconfig sha256: {}\n\n", self.name, self.claim, self.seed, self.config_sha256);
        for v in &self.verdicts {
            let range = match (v.min, v.max) {
                (Some(a), Some(b)) => format!("in [{a:e}, {b:e}]"),
                (Some(a), None) => format!(">= {a:e}"),
                (None, Some(b)) => format!("<= {b:e}"),
                (None, None) => String::new(),
            };
            let _ = writeln!(s, "{} {} = {:.6e} {}", if v.pass { "PASS" } else { "FAIL" }, v.metric, v.value, range);
        }
        let _ = writeln!(s, "\nartifacts:");
        for a in &self.artifacts {
            let _ = writeln!(s, "  {} {} ({} bytes)", a.sha256, a.file, a.bytes);
        }
        let _ = writeln!(s, "\nverdict: {}", if self.pass { "PASS" } else { "FAIL" });
        s
    }
}

fn write_file(dir: &Path, file: &str, contents: &str) -> Result<Artifact> {
    std::fs::write(dir.join(file), contents)?;
    Ok(Artifact {
        file: file.to_string(),
        sha256: sha256_hex(contents.as_bytes()),
        bytes: contents.len(),
    })
}

/// Run the pipeline and write everything under `out_dir/<name>/`.
pub fn run(scenario: &Scenario, out_dir: &Path) -> Result<Report> {
    run_inner(scenario, out_dir).map_err(|e| e.in_scenario(&scenario.name))
}

fn run_inner(scenario: &Scenario, out_dir: &Path) -> Result<Report> {
    scenario.validate()?;
    let ctx = Context::new(scenario)?;
    let mut metrics = BTreeMap::new();
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    for op in &scenario.pipeline {
        let out = op.execute(&ctx)?;
        for (k, v) in out.metrics {
            if metrics.insert(k.clone(), v).is_some() {
                return Err(LabError::Config(format!("metric `{k}` is produced twice")));
            }
        }
        for (f, c) in out.artifacts {
            if files.insert(f.clone(), c).is_some() {
                return Err(LabError::Config(format!("artifact `{f}` is produced twice")));
            }
        }
    }
    let verdicts = scenario
        .thresholds
        .iter()
        .map(|t| {
            let value = *metrics
                .get(&t.metric)
                .ok_or_else(|| LabError::Config(format!("threshold names unknown metric `{}`", t.metric)))?;
            Ok(Verdict { metric: t.metric.clone(), value, min: t.min, max: t.max, pass: t.accepts(value) })
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = out_dir.join(&scenario.name);
    std::fs::create_dir_all(&dir)?;
    let mut artifacts = vec![write_file(&dir, "scenario.toml", &scenario.to_toml()?)?];
    for (f, c) in &files {
        artifacts.push(write_file(&dir, f, c)?);
    }
    let report = Report {
        schema_version: SCHEMA_VERSION,
        name: scenario.name.clone(),
        claim: scenario.claim.clone(),
        seed: scenario.seed,
        config_sha256: scenario.config_hash()?,
        pass: verdicts.iter().all(|v| v.pass),
        metrics,
        verdicts,
        artifacts,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    std::fs::write(dir.join("report.json"), json)?;
    std::fs::write(dir.join("summary.txt"), report.summary())?;
    Ok(report)
}

/// Run every builtin scenario, in parallel, each in its own directory.
pub fn verify_all(out_dir: &Path) -> Vec<(&'static str, Result<Report>)> {
    let names = list_builtin();
    let runs: Vec<Result<Report>> = names.par_iter().map(|n| run(&builtin(n)?, out_dir)).collect();
    names.into_iter().zip(runs).collect()
}

/// `sha256  path` lines for every file written by `verify_all`, sorted by path.
pub fn hash_manifest(out_dir: &Path, reports: &[Report]) -> Result<String> {
    let mut lines = Vec::new();
    for r in reports {
        for f in r.artifacts.iter().map(|a| a.file.as_str()).chain(["report.json", "summary.txt"]) {
            let bytes = std::fs::read(out_dir.join(&r.name).join(f))?;
            lines.push(format!("{}  {}/{}", sha256_hex(&bytes), r.name, f));
        }
    }
    lines.sort_by(|a, b| a[66..].cmp(&b[66..]));
    Ok(lines.join("\n") + "\n")
}
