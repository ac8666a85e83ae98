use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{make_model, ManifoldModel, MetricChart, ModelName, ModelParams};
use crate::error::{LabError, Result};

/// Model section of a config file:
///
/// ```toml
/// name = "conformal_bump_torus"
/// [params]
/// periods = [6.283185307179586, 6.283185307179586]
/// bumps = [{ center = [3.14, 3.14], radius = 1.0, amplitude = 0.2 }]
/// ```
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: ModelName,
    #[serde(default)]
    pub params: ModelParams,
}

impl ModelSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn build(&self) -> Result<ManifoldModel> {
        make_model(self.name, &self.params)
    }
}

/// Sample `g^{ij}` on a regular grid of a 2-dimensional chart.
/// Columns: `x1,x2,g11,g12,g22,in_domain`.
pub fn export_grid_csv(chart: &MetricChart, lo: [f64; 2], hi: [f64; 2], n: usize) -> Result<String> {
    if chart.n() != 2 {
        return Err(LabError::Unsupported("grid export is implemented for n = 2".into()));
    }
    let mut out = String::from("x1,x2,g11,g12,g22,in_domain\n");
    let step = |k: usize, a: f64, b: f64| if n > 1 { a + (b - a) * k as f64 / (n - 1) as f64 } else { a };
    for i in 0..n {
        for j in 0..n {
            let x = [step(i, lo[0], hi[0]), step(j, lo[1], hi[1])];
            if chart.contains(&x) {
                let g = chart.ginv(&x);
                writeln!(out, "{},{},{},{},{},1", x[0], x[1], g[(0, 0)], g[(0, 1)], g[(1, 1)]).unwrap();
            } else {
                writeln!(out, "{},{},,,,0", x[0], x[1]).unwrap();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_roundtrip_and_unknown_keys() {
        let s = ModelSpec::from_toml("name = \"round_sphere\"\n[params]\ndelta_pole = 0.2\n").unwrap();
        assert_eq!(s.name, ModelName::RoundSphere);
        assert_eq!(s.params.delta_pole, 0.2);
        assert!(ModelSpec::from_toml("name = \"round_sphere\"\n[params]\nbogus = 1\n").is_err());
        assert!(ModelSpec::from_toml("name = \"klein_bottle\"\n").is_err());
    }

    #[test]
    fn grid_export_marks_domain() {
        let m = ModelSpec::from_toml("name = \"round_sphere\"").unwrap().build().unwrap();
        let csv = export_grid_csv(&m.chart, [0.0, -1.55], [1.0, 0.0], 3).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 10);
        assert!(lines[1].ends_with(",0"));
        assert!(lines[3].ends_with(",1"));
    }
}
