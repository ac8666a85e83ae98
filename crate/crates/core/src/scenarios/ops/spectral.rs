use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::charts::MetricChart;
use crate::conormal::{find_returns, ReturnOptions, SigmaSpec, Submanifold};
use crate::error::{LabError, Result};
use crate::kuznecov::{
    fit_leading, frequency_resolution, individual_bound_check, oscillation_spectrum, sphere_series, torus_series,
    KuznecovSeries, LeadingFit, Peak, SpectrumOptions,
};
use crate::scenarios::{Context, OpOutput};

fn nonzero_csv(series: &KuznecovSeries) -> String {
    let mut out = String::from("lambda,weight,cumulative\n");
    let mut acc = 0.0;
    for e in &series.entries {
        acc += e.weight;
        if e.weight != 0.0 {
            let _ = writeln!(out, "{:.15e},{:.15e},{:.15e}", e.lambda, e.weight, acc);
        }
    }
    out
}

fn fit_json(fit: &LeadingFit) -> serde_json::Value {
    json!({
        "codim": fit.codim,
        "c_fit": fit.c_fit,
        "exponent_fit": fit.exponent_fit,
        "intercept": fit.intercept,
        "fit_range": fit.fit_range,
        "grid_points": fit.lambda_grid.len(),
        "max_abs_residual": fit.max_abs_residual,
    })
}

/// Distinct conormal return times of Σ in `[t_min, t_max]`.
fn return_times(sigma: &dyn Submanifold, chart: &MetricChart, t_min: f64, t_max: f64, opts: &ReturnOptions) -> Result<Vec<f64>> {
    let mut times: Vec<f64> = find_returns(sigma, chart, t_max, opts)?
        .iter()
        .map(|e| e.t_return)
        .filter(|t| *t >= t_min)
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    Ok(times)
}

/// Spectrum of the smoothed residual, matched against the dynamical return times.
fn spectral_match(fit: &LeadingFit, spectrum: &SpectrumOptions, times: &[f64], out: &mut OpOutput) -> Result<()> {
    let peaks = oscillation_spectrum(&fit.lambda_grid, &fit.residual_smoothed, spectrum)?;
    let res = frequency_resolution(&fit.lambda_grid);
    let nearest = |t: f64, set: &mut dyn Iterator<Item = f64>| set.map(|s| (s - t).abs()).fold(f64::INFINITY, f64::min);
    let worst = peaks.iter().map(|p| nearest(p.t, &mut times.iter().copied()) / res).fold(0.0, f64::max);
    let unmatched = times.iter().filter(|t| nearest(**t, &mut peaks.iter().map(|p| p.t)) > res).count();
    let mut csv = String::from("t,amplitude,nearest_return\n");
    for Peak { t, amplitude } in &peaks {
        let r = times.iter().copied().min_by(|a, b| (a - t).abs().total_cmp(&(b - t).abs())).unwrap_or(f64::NAN);
        let _ = writeln!(csv, "{t:.12e},{amplitude:.12e},{r:.12e}");
    }
    let mut rt = String::from("t_return\n");
    for t in times {
        let _ = writeln!(rt, "{t:.12e}");
    }
    out.metric("peak_count", peaks.len() as f64);
    out.metric("return_time_count", times.len() as f64);
    out.metric("peak_match_ratio", if peaks.is_empty() { f64::INFINITY } else { worst });
    out.metric("unmatched_returns", unmatched as f64);
    out.metric("frequency_resolution", res);
    out.artifact("peaks.csv", csv);
    out.artifact("return_times.csv", rt);
    Ok(())
}

fn horizon(spectrum: &SpectrumOptions) -> Result<f64> {
    spectrum.t_max.ok_or_else(|| LabError::Config("spectrum.t_max is required to bound the return scan".into()))
}

/// Independent count for a closed line `{x₂ = c}` of a flat 2-torus: every
/// lattice point, with the period integral by the trapezoid rule (exact for
/// trigonometric polynomials of degree below `nodes`).
fn lattice_oracle(periods: &[f64], line_len: f64, lambda_max: f64, nodes: usize) -> Vec<(f64, f64)> {
    let (p1, p2) = (periods[0], periods[1]);
    let vol = p1 * p2;
    let m1_max = (lambda_max * p1 / (2.0 * PI) + 1e-9).floor() as i64;
    let m2_max = (lambda_max * p2 / (2.0 * PI) + 1e-9).floor() as i64;
    let h = line_len / nodes as f64;
    let mut out = Vec::new();
    for m1 in -m1_max..=m1_max {
        let k1 = m1 as f64 * (2.0 * PI / p1);
        let (re, im) = (0..nodes).fold((0.0, 0.0), |(re, im), j| {
            let (s, c) = (k1 * j as f64 * h).sin_cos();
            (re + c * h, im + s * h)
        });
        let w = (re * re + im * im) / vol;
        for m2 in -m2_max..=m2_max {
            let k2 = m2 as f64 * (2.0 * PI / p2);
            let l = k1.hypot(k2);
            if l <= lambda_max {
                out.push((l, w));
            }
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Max of `|N(λ) − N_oracle(λ)|` between consecutive distinct eigenvalues and at `λ_max`.
fn count_mismatch(series: &KuznecovSeries, oracle: &[(f64, f64)], lambda_max: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut acc = 0.0;
    for (k, (l, w)) in oracle.iter().enumerate() {
        acc += w;
        let next = oracle.get(k + 1).map(|e| e.0);
        match next {
            Some(nl) if nl - l <= 1e-9 => continue,
            Some(nl) => worst = worst.max((series.count(0.5 * (l + nl)) - acc).abs()),
            None => worst = worst.max((series.count(lambda_max) - acc).abs()),
        }
    }
    worst
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TorusKuznecov {
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub points: usize,
    pub oracle_nodes: usize,
    pub spectrum: SpectrumOptions,
    pub returns: ReturnOptions,
}

impl Default for TorusKuznecov {
    fn default() -> Self {
        Self {
            lambda_max: 500.0,
            lambda_min: 1.0,
            points: 1 << 14,
            oracle_nodes: 2048,
            spectrum: SpectrumOptions { t_max: Some(20.0), ..SpectrumOptions::default() },
            returns: ReturnOptions { grid: 8, ..ReturnOptions::default() },
        }
    }
}

impl TorusKuznecov {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let chart = ctx.chart(op)?;
        let periods = &ctx.model.as_ref().expect("chart implies model").params.periods;
        let (spec, sigma) = ctx.sigma(op)?;
        let series = torus_series(periods, spec, self.lambda_max)?;
        let mut out = OpOutput::default();
        if let SigmaSpec::TorusLine { period, .. } = spec {
            if periods.len() == 2 {
                let oracle = lattice_oracle(periods, *period, self.lambda_max, self.oracle_nodes);
                out.metric("count_mismatch", count_mismatch(&series, &oracle, self.lambda_max));
            }
        }
        let fit = fit_leading(&series, self.lambda_min, self.points)?;
        out.metric("c_fit", fit.c_fit);
        out.metric("exponent_fit", fit.exponent_fit);
        out.metric("max_abs_residual", fit.max_abs_residual);
        out.metric("individual_bound", individual_bound_check(&series));
        let times = return_times(sigma, chart, self.spectrum.t_min, horizon(&self.spectrum)?, &self.returns)?;
        spectral_match(&fit, &self.spectrum, &times, &mut out)?;
        out.artifact("series.csv", nonzero_csv(&series));
        out.artifact("residual.csv", fit.residual_csv(&series));
        out.json("fit.json", &fit_json(&fit))?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SphereKuznecov {
    pub l_max: usize,
    /// Shorter horizon for the stability comparison.
    pub l_control: usize,
    pub lambda_min: f64,
    pub points: usize,
    pub spectrum: SpectrumOptions,
    pub returns: ReturnOptions,
}

impl Default for SphereKuznecov {
    fn default() -> Self {
        Self {
            l_max: 400,
            l_control: 200,
            lambda_min: 1.0,
            points: 1 << 14,
            spectrum: SpectrumOptions { t_max: Some(7.0), ..SpectrumOptions::default() },
            returns: ReturnOptions { grid: 8, ..ReturnOptions::default() },
        }
    }
}

impl SphereKuznecov {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let chart = ctx.chart(op)?;
        let (spec, sigma) = ctx.sigma(op)?;
        let series = sphere_series(spec, self.l_max)?;
        let control = sphere_series(spec, self.l_control)?;
        let degree = |lambda: f64| (((1.0 + 4.0 * lambda * lambda).sqrt() - 1.0) / 2.0).round() as usize;
        let odd = series.entries.iter().filter(|e| degree(e.lambda) % 2 == 1).map(|e| e.weight.abs()).fold(0.0, f64::max);
        let fit = fit_leading(&series, self.lambda_min, self.points)?;
        let fit_c = fit_leading(&control, self.lambda_min, self.points)?;
        let (b, bc) = (individual_bound_check(&series), individual_bound_check(&control));
        let mut out = OpOutput::default();
        out.metric("odd_weight_max", odd);
        out.metric("c_fit", fit.c_fit);
        out.metric("exponent_fit", fit.exponent_fit);
        out.metric("max_abs_residual", fit.max_abs_residual);
        out.metric("residual_stability", (fit.max_abs_residual - fit_c.max_abs_residual).abs() / fit_c.max_abs_residual);
        out.metric("individual_bound", b);
        out.metric("bound_stability", (b - bc).abs() / bc);
        let times = return_times(sigma, chart, self.spectrum.t_min, horizon(&self.spectrum)?, &self.returns)?;
        spectral_match(&fit, &self.spectrum, &times, &mut out)?;
        out.artifact("series.csv", nonzero_csv(&series));
        out.artifact("residual.csv", fit.residual_csv(&series));
        out.json("fit.json", &json!({ "l_max": self.l_max, "fit": fit_json(&fit), "control": fit_json(&fit_c) }))?;
        Ok(out)
    }
}
