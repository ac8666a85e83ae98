use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::charts::{make_model, scale_chart, MetricChart, ModelName, ModelParams};
use crate::conormal::ReturnOptions;
use crate::error::{LabError, Result};
use crate::linalg::linear_fit;
use crate::perturb_conformal::{
    break_loop, build_bumps, closed_form_axis, closed_form_transverse, endpoint_jacobian, epsilon_error_curve,
    linear_response, nearby_returns, perturbed_ambient, second_pass_cancellation, target_loop_tail, AxisProfile,
    BreakLoopOptions, Forcing, ProfileSum, SeparableProfile, TailOptions, TubeCutoff, DEFAULT_ORDER,
};
use crate::scenarios::fold::{build_fold, FoldOptions};
use crate::scenarios::{Context, OpOutput};

fn default_tube() -> TubeCutoff {
    TubeCutoff { r_inner: 0.1, r_outer: 0.2 }
}

fn unit_grid(k: usize) -> Vec<f64> {
    (0..=k).map(|i| i as f64 / k as f64).collect()
}

/// Max deviation of the integrated linear response from a closed form over profiles and charts.
fn response_error(
    charts: &[MetricChart],
    profiles: &[ProfileSum],
    grid: &[f64],
    closed: fn(&ProfileSum, f64) -> (Vec<f64>, Vec<f64>),
) -> Result<f64> {
    let mut worst = 0.0f64;
    for chart in charts {
        for f in profiles {
            let r = linear_response(chart, f, grid)?;
            for (k, t) in grid.iter().enumerate() {
                let (dx, dxi) = closed(f, *t);
                for i in 0..dx.len() {
                    worst = worst.max((r.dx_ds[k][i] - dx[i]).abs()).max((r.dxi_ds[k][i] - dxi[i]).abs());
                }
            }
        }
    }
    Ok(worst)
}

/// Linear response to profiles that are constant across the tube.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AxisResponse {
    pub profiles: Vec<AxisProfile>,
    pub tube: TubeCutoff,
    pub epsilons: Vec<f64>,
    pub grid: usize,
}

impl Default for AxisResponse {
    fn default() -> Self {
        Self {
            profiles: vec![
                AxisProfile::new(0.15, 0.85, vec![1.0]),
                AxisProfile::new(0.15, 0.85, vec![0.5, 2.0]),
                AxisProfile::new(0.15, 0.85, vec![-1.0, 0.0, 4.0]),
            ],
            tube: default_tube(),
            epsilons: vec![0.0, 1.0],
            grid: 10,
        }
    }
}

impl AxisResponse {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let base = ctx.chart(op)?;
        let n = base.n();
        let charts = self.epsilons.iter().map(|e| scale_chart(base, *e)).collect::<Result<Vec<_>>>()?;
        let profiles: Vec<ProfileSum> = self
            .profiles
            .iter()
            .map(|a| ProfileSum::single(n, SeparableProfile { axis: a.clone(), tube: self.tube.clone(), linear: None }))
            .collect();
        let mut out = OpOutput::default();
        out.metric("axis_max_error", response_error(&charts, &profiles, &unit_grid(self.grid), closed_form_axis)?);
        out.metric("axis_profile_count", profiles.len() as f64);
        Ok(out)
    }
}

/// Linear response to profiles linear in one transverse coordinate, at ε = 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransverseResponse {
    pub profiles: Vec<AxisProfile>,
    pub tube: TubeCutoff,
    pub linear: usize,
    pub grid: usize,
}

impl Default for TransverseResponse {
    fn default() -> Self {
        Self {
            profiles: vec![
                AxisProfile::new(0.1, 0.9, vec![1.0]),
                AxisProfile::new(0.2, 0.6, vec![0.0, 1.0]),
                AxisProfile::new(0.3, 0.95, vec![2.0, -1.0]),
                AxisProfile::new(0.05, 0.5, vec![1.0, 0.0, -3.0]),
                AxisProfile::new(0.4, 0.8, vec![-0.5, 1.0, 1.0]),
            ],
            tube: default_tube(),
            linear: 1,
            grid: 10,
        }
    }
}

impl TransverseResponse {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let base = ctx.chart(op)?;
        let n = base.n();
        let profiles: Vec<ProfileSum> = self
            .profiles
            .iter()
            .map(|a| {
                ProfileSum::single(n, SeparableProfile { axis: a.clone(), tube: self.tube.clone(), linear: Some(self.linear) })
            })
            .collect();
        let chart = scale_chart(base, 0.0)?;
        let err = response_error(&[chart], &profiles, &unit_grid(self.grid), closed_form_transverse)?;
        let mut out = OpOutput::default();
        out.metric("transverse_max_error", err);
        out.metric("transverse_profile_count", profiles.len() as f64);
        Ok(out)
    }
}

/// Deviation of the ε-scaled response from the ε = 0 closed form, as a function of ε.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseOrder {
    pub profile: AxisProfile,
    pub tube: TubeCutoff,
    pub linear: usize,
    pub epsilons: Vec<f64>,
    pub samples: usize,
}

impl Default for ResponseOrder {
    fn default() -> Self {
        Self {
            profile: AxisProfile::new(0.1, 0.9, vec![1.0, -1.0]),
            tube: default_tube(),
            linear: 1,
            epsilons: vec![0.2, 0.1, 0.05, 0.025],
            samples: 20,
        }
    }
}

impl ResponseOrder {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let base = ctx.chart(op)?;
        let f = ProfileSum::single(
            base.n(),
            SeparableProfile { axis: self.profile.clone(), tube: self.tube.clone(), linear: Some(self.linear) },
        );
        let curve = epsilon_error_curve(base, &f, &self.epsilons, self.samples)?;
        let mut out = OpOutput::default();
        out.metric("slope_x", curve.slope_x);
        out.metric("slope_xi", curve.slope_xi);
        out.artifact("error_curve.csv", curve.to_csv());
        Ok(out)
    }
}

/// Endpoint Jacobian of the three-bump family: ε = 0 limit, ε² approach to the
/// block pattern and the smallest singular value at small ε.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSurjectivity {
    pub tube_radius: f64,
    pub epsilons: Vec<f64>,
    /// `min_sigma_small_eps` is taken over `ε ≤ small_eps`.
    pub small_eps: f64,
}

impl Default for EndpointSurjectivity {
    fn default() -> Self {
        Self { tube_radius: 0.2, epsilons: vec![0.2, 0.1, 0.05, 0.025], small_eps: 0.05 }
    }
}

impl EndpointSurjectivity {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let base = ctx.chart(op)?;
        let bumps = build_bumps(self.tube_radius, DEFAULT_ORDER)?;
        let limit = endpoint_jacobian(base, &bumps, 0.0)?;
        let mut csv = String::from("epsilon,sigma_min,pattern_deviation\n");
        let _ = writeln!(csv, "0,{:.12e},{:.12e}", limit.sigma_min, limit.pattern_deviation);
        let mut rows = Vec::new();
        for &e in &self.epsilons {
            let j = endpoint_jacobian(base, &bumps, e)?;
            let _ = writeln!(csv, "{e:e},{:.12e},{:.12e}", j.sigma_min, j.pattern_deviation);
            rows.push(j);
        }
        let lx: Vec<f64> = rows.iter().map(|j| j.epsilon.ln()).collect();
        let ly: Vec<f64> = rows.iter().map(|j| j.pattern_deviation.ln()).collect();
        let (slope, _) = linear_fit(&lx, &ly);
        let small = rows.iter().filter(|j| j.epsilon <= self.small_eps).map(|j| j.sigma_min).fold(f64::INFINITY, f64::min);
        let mut out = OpOutput::default();
        out.metric("limit_sigma_min", limit.sigma_min);
        out.metric("limit_pattern_deviation", limit.pattern_deviation);
        out.metric("pattern_slope", slope);
        out.metric("min_sigma_small_eps", small);
        out.artifact("endpoint_jacobian.csv", csv);
        out.json("endpoint_jacobian_limit.json", &limit)?;
        Ok(out)
    }
}

/// Tail of the degenerate return on the constructed bumped torus.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopTailOp {
    pub fold: FoldOptions,
    pub tail: TailOptions,
}

impl LoopTailOp {
    pub(crate) fn run(&self) -> Result<OpOutput> {
        let f = build_fold(&self.fold)?;
        let t = target_loop_tail(&f.chart, &f.sigma, &f.event, &self.tail)?;
        let mut out = OpOutput::default();
        out.metric("return_defect", f.event.transversality_defect);
        out.metric("return_time", f.event.t_return);
        out.metric("tail_length", t.length);
        out.metric("tail_margin", t.margin);
        out.metric("tube_radius", t.tube_radius);
        out.flag("affine_tail", t.map.is_affine());
        out.json(
            "loop_tail.json",
            &json!({
                "inner_amplitude": f.inner_amplitude,
                "residual_slope": f.slope,
                "residual_cubic": f.cubic,
                "event": f.event,
                "t_start": t.t_start,
                "t_end": t.t_end,
                "length": t.length,
                "margin": t.margin,
                "closest_pass": t.closest_pass,
                "tube_radius": t.tube_radius,
                "affine": t.map.is_affine(),
            }),
        )?;
        Ok(out)
    }
}

/// Forced Jacobi equation over two passes on the half-turn quotient and on the full sphere.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Cancellation {
    pub forcing: Forcing,
}

impl Default for Cancellation {
    fn default() -> Self {
        Self { forcing: Forcing { t0: 1.0, width: 0.3, amplitude: 0.5 } }
    }
}

impl Cancellation {
    pub(crate) fn run(&self) -> Result<OpOutput> {
        let chart = |m| make_model(m, &ModelParams::default()).map(|m| m.chart);
        let q = second_pass_cancellation(&chart(ModelName::HalfTurnQuotient)?, &self.forcing)?;
        let s = second_pass_cancellation(&chart(ModelName::RoundSphere)?, &self.forcing)?;
        let mut out = OpOutput::default();
        out.metric("quotient_ratio", q.ratio);
        out.metric("sphere_ratio", s.ratio);
        out.metric("quotient_first_over_scale", q.first_return_mag / q.forcing_scale);
        out.json("cancellation.json", &json!({ "half_turn_quotient": q, "round_sphere": s }))?;
        Ok(out)
    }
}

/// Break the degenerate return of the constructed bumped torus and re-verify
/// on a finer scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreakLoopOp {
    pub fold: FoldOptions,
    pub options: BreakLoopOptions,
    /// Grid and sampling refinement of the verification rescan.
    pub rescan_factor: usize,
}

impl Default for BreakLoopOp {
    fn default() -> Self {
        Self { fold: FoldOptions::default(), options: BreakLoopOptions::default(), rescan_factor: 2 }
    }
}

impl BreakLoopOp {
    pub(crate) fn run(&self) -> Result<OpOutput> {
        if self.rescan_factor < 2 {
            return Err(LabError::Config("rescan_factor must be at least 2".into()));
        }
        let f = build_fold(&self.fold)?;
        let o = &self.options;
        let (chart, rep) = break_loop(&f.chart, &f.sigma, &f.event, o)?;
        let k = self.rescan_factor;
        let fine = ReturnOptions { grid: k * o.returns.grid, sample_step: o.returns.sample_step / k as f64, ..o.returns.clone() };
        let (_, rescan) = nearby_returns(&f.sigma, &chart, &f.event, o.window, o.t_window, &fine)?;
        let tail = target_loop_tail(&f.chart, &f.sigma, &f.event, &o.tail)?;
        let doubled: Vec<f64> = rep.params.s.iter().map(|v| 2.0 * v).collect();
        let c2 = perturbed_ambient(&f.chart, &tail, &doubled)?;
        let (_, d2) = nearby_returns(&f.sigma, &c2, &f.event, o.window, o.t_window, &o.returns)?;
        let mut out = OpOutput::default();
        out.flag("success", rep.success);
        out.metric("s_norm", rep.s_norm);
        out.metric("defect_before", rep.defect_before);
        out.metric("defect_after", rep.defect_after.unwrap_or(f64::NAN));
        out.metric("rescan_defect", rescan.unwrap_or(f64::NAN));
        out.metric("doubled_s_defect", d2.unwrap_or(f64::NAN));
        out.metric("jacobian_sigma_min", rep.jacobian_sigma_min);
        out.json("break_loop.json", &rep)?;
        Ok(out)
    }
}
