//! Bumped torus with a degenerate (cubic) return of the normal family of
//! `Σ = {x₂ ≡ 0 mod π}`.
//!
//! Two concentric bumps centered on `(c0, π/2)` act as a lens on the vertical
//! normal geodesics. The outer amplitude is fixed and the inner one is tuned so
//! that the terminal residual `R(c) = ξ₁/|ξ|` at `x₂ = π` has `R'(c0) = 0`; by
//! symmetry `R(c0) = 0`, hence `R(c) ≈ k (c − c0)³`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::charts::{make_model, BumpSpec, MetricChart, ModelName, ModelParams, PhasePoint};
use crate::conormal::{find_returns, CoordinateSlice, ReturnEvent, ReturnOptions};
use crate::error::{LabError, Result};
use crate::flow::{trajectory, DEFAULT_TOL};
use crate::linalg::brent;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldOptions {
    pub c0: f64,
    pub outer_radius: f64,
    pub outer_amplitude: f64,
    pub inner_radius: f64,
    /// Search interval for the inner amplitude.
    pub bracket: (f64, f64),
    pub h: f64,
}

impl Default for FoldOptions {
    fn default() -> Self {
        Self {
            c0: PI,
            outer_radius: 0.8,
            outer_amplitude: 0.3,
            inner_radius: 0.4,
            bracket: (-0.9, 0.0),
            h: 2e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FoldScenario {
    pub chart: MetricChart,
    pub sigma: CoordinateSlice,
    pub params: ModelParams,
    pub inner_amplitude: f64,
    /// Residual slope `R'(c0)` after tuning.
    pub slope: f64,
    /// Cubic coefficient `R'''(c0)/6`.
    pub cubic: f64,
    pub event: ReturnEvent,
}

pub fn fold_params(opts: &FoldOptions, inner: f64) -> ModelParams {
    let center = vec![opts.c0, PI / 2.0];
    ModelParams {
        bumps: vec![
            BumpSpec { center: center.clone(), radius: opts.outer_radius, amplitude: opts.outer_amplitude },
            BumpSpec { center, radius: opts.inner_radius, amplitude: inner },
        ],
        ..ModelParams::default()
    }
}

/// `ξ₁/|ξ|` where the upward normal geodesic from `(c, 0)` first meets `x₂ = π`.
pub fn terminal_residual(chart: &MetricChart, c: f64) -> Result<f64> {
    let x = vec![c, 0.0];
    let e = chart.symbol(&PhasePoint::new(x.clone(), vec![0.0, 1.0]))?;
    let p0 = PhasePoint::new(x, vec![0.0, 1.0 / e.sqrt()]);
    let horizon = 2.0 * PI;
    let traj = trajectory(chart, &p0, horizon, DEFAULT_TOL, false)?;
    let g = |t: f64| traj.state(t)[1] - PI;
    let dt = 0.02;
    let mut t = dt;
    while t <= horizon {
        if g(t) >= 0.0 {
            let ts = brent(g, t - dt, t, 1e-14, 200)
                .ok_or_else(|| LabError::SearchFailed("crossing refinement failed".into()))?;
            let xi = traj.state(ts);
            return Ok(xi[2] / xi[2].hypot(xi[3]));
        }
        t += dt;
    }
    Err(LabError::SearchFailed("normal geodesic does not reach x₂ = π".into()))
}

/// Richardson-corrected central differences of `R` at `c0`: `(R', R'''/6)`.
pub fn residual_derivatives(chart: &MetricChart, c0: f64, h: f64) -> Result<(f64, f64)> {
    let d = |h: f64| -> Result<f64> {
        Ok((terminal_residual(chart, c0 + h)? - terminal_residual(chart, c0 - h)?) / (2.0 * h))
    };
    let (d1, d2) = (d(h)?, d(2.0 * h)?);
    let slope = (4.0 * d1 - d2) / 3.0;
    // D(h) = R' + (R'''/6) h² + O(h⁴).
    let cubic = (d2 - d1) / (3.0 * h * h);
    Ok((slope, cubic))
}

pub fn build_fold(opts: &FoldOptions) -> Result<FoldScenario> {
    let chart_for = |b: f64| make_model(ModelName::ConformalBumpTorus, &fold_params(opts, b)).map(|m| m.chart);
    let slope_at = |b: f64| -> f64 {
        chart_for(b)
            .and_then(|c| residual_derivatives(&c, opts.c0, opts.h))
            .map(|d| d.0)
            .unwrap_or(f64::NAN)
    };
    let (lo, hi) = opts.bracket;
    let inner = brent(slope_at, lo, hi, 1e-13, 200)
        .ok_or_else(|| LabError::SearchFailed("inner amplitude bracket does not change the slope sign".into()))?;
    let params = fold_params(opts, inner);
    let chart = make_model(ModelName::ConformalBumpTorus, &params)?.chart;
    let (slope, cubic) = residual_derivatives(&chart, opts.c0, opts.h)?;
    let sigma = CoordinateSlice::torus_horizontal(0.0, 2.0 * PI, PI);
    let ro = ReturnOptions { grid: 5, window: Some((opts.c0 - 0.01, opts.c0 + 0.01)), ..ReturnOptions::default() };
    let event = find_returns(&sigma, &chart, 2.0 * PI, &ro)?
        .into_iter()
        .filter(|e| e.start.normal_coeffs[0] > 0.0 && e.t_return < 1.5 * PI)
        .min_by(|a, b| {
            let da = (a.start.sigma_param[0] - opts.c0).abs();
            let db = (b.start.sigma_param[0] - opts.c0).abs();
            da.total_cmp(&db)
        })
        .ok_or_else(|| LabError::SearchFailed("degenerate return not detected".into()))?;
    Ok(FoldScenario { chart, sigma, params, inner_amplitude: inner, slope, cubic, event })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_is_cubic() {
        let f = build_fold(&FoldOptions::default()).unwrap();
        assert!(f.slope.abs() < 1e-6);
        assert!((f.event.start.sigma_param[0] - PI).abs() < 1e-9);
        assert!(f.cubic.abs() > 1e-2);
        assert!(f.event.transversality_defect < 1e-4);
    }
}

#[cfg(test)]
mod break_tests {
    use super::*;
    use crate::perturb_conformal::{break_loop, nearby_returns, BreakLoopOptions};

    #[test]
    fn fold_breaks_and_rescan_agrees() {
        let f = build_fold(&FoldOptions::default()).unwrap();
        let opts = BreakLoopOptions::default();
        let (chart, r) = break_loop(&f.chart, &f.sigma, &f.event, &opts).unwrap();
        assert!(r.success && r.defect_before < 1e-4);
        assert!(r.s_norm <= 0.1 + 1e-12 && r.defect_after.unwrap() >= 1e-3);
        let fine = ReturnOptions { grid: 2 * opts.returns.grid, sample_step: 0.5 * opts.returns.sample_step, ..opts.returns.clone() };
        let (events, d) = nearby_returns(&f.sigma, &chart, &f.event, opts.window, opts.t_window, &fine).unwrap();
        assert!(!events.is_empty() && d.unwrap() >= 1e-3);
        let doubled: Vec<f64> = r.params.s.iter().map(|v| 2.0 * v).collect();
        let tail = crate::perturb_conformal::target_loop_tail(&f.chart, &f.sigma, &f.event, &opts.tail).unwrap();
        let c2 = crate::perturb_conformal::perturbed_ambient(&f.chart, &tail, &doubled).unwrap();
        let (_, d2) = nearby_returns(&f.sigma, &c2, &f.event, opts.window, opts.t_window, &opts.returns).unwrap();
        assert!(d2.unwrap() > 0.0);
    }
}
