use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::random_direction;
use crate::charts::{make_model, MetricChart, ModelName, ModelParams, PhasePoint};
use crate::conormal::{find_returns, poincare_rank_defect, returns_csv, ReturnOptions};
use crate::error::{LabError, Result};
use crate::flow::{integrate_jet, trajectory};
use crate::linalg::{rank, symplecticity_defect};
use crate::perturb_diffeo::{
    pullback_metric, separate_closed_geodesic, tau_f, tau_f_param_jacobian, Cutoff, DiffeoParams, SeparationOptions,
};
use crate::scenarios::{Context, OpOutput};

fn unit_energy(chart: &MetricChart, x: Vec<f64>, dir: Vec<f64>) -> Result<PhasePoint> {
    let e = chart.symbol(&PhasePoint::new(x.clone(), dir.clone()))?;
    Ok(PhasePoint::new(x, dir.iter().map(|v| v / e.sqrt()).collect()))
}

/// Energy conservation and symplecticity of the flow Jacobian on random
/// unit-energy starts. Orbits that leave the chart are redrawn.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConservation {
    pub models: Vec<ModelName>,
    pub starts: usize,
    pub horizon: f64,
    pub tol: f64,
    pub max_draws: usize,
}

impl Default for FlowConservation {
    fn default() -> Self {
        Self { models: ModelName::ALL.to_vec(), starts: 100, horizon: 20.0, tol: 1e-10, max_draws: 20_000 }
    }
}

/// Half-width of the sampling box in the non-periodic coordinate.
fn sample_half_width(name: ModelName, p: &ModelParams) -> f64 {
    match name {
        ModelName::RoundSphere | ModelName::HalfTurnQuotient => 0.5 * (PI / 2.0 - p.delta_pole),
        ModelName::FermiSegment => 0.5 * p.r_tube,
        ModelName::FlatTorus | ModelName::ConformalBumpTorus => 0.0,
    }
}

impl FlowConservation {
    pub(crate) fn run(&self, ctx: &Context) -> Result<OpOutput> {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let mut out = OpOutput::default();
        let mut csv = String::from("model,k,x1,x2,xi1,xi2,energy_drift,symplecticity_defect\n");
        let (mut drift, mut sympl, mut fewest) = (0.0f64, 0.0f64, usize::MAX);
        for &name in &self.models {
            let params = ModelParams::default();
            let chart = make_model(name, &params)?.chart;
            let hw = sample_half_width(name, &params);
            let periods = chart.periods();
            let mut accepted: Vec<(PhasePoint, f64, f64)> = Vec::new();
            let mut draws = 0;
            while accepted.len() < self.starts && draws < self.max_draws {
                let batch: Vec<PhasePoint> = (0..2 * self.starts)
                    .map(|_| {
                        let x = periods
                            .iter()
                            .map(|p| match p {
                                Some(p) => rng.gen_range(0.0..*p),
                                None => rng.gen_range(-hw..hw),
                            })
                            .collect();
                        (x, random_direction(&mut rng, chart.n()))
                    })
                    .map(|(x, d)| unit_energy(&chart, x, d))
                    .collect::<Result<_>>()?;
                draws += batch.len();
                let runs: Vec<Option<(PhasePoint, f64, f64)>> = batch
                    .into_par_iter()
                    .map(|p| match integrate_jet(&chart, &p, self.horizon, self.tol) {
                        Ok(j) => Ok(Some((p, j.energy_drift, symplecticity_defect(&j.jacobian)))),
                        Err(LabError::ChartExit { .. }) => Ok(None),
                        Err(e) => Err(e),
                    })
                    .collect::<Result<_>>()?;
                accepted.extend(runs.into_iter().flatten());
            }
            accepted.truncate(self.starts);
            fewest = fewest.min(accepted.len());
            for (k, (p, d, s)) in accepted.iter().enumerate() {
                drift = drift.max(*d);
                sympl = sympl.max(*s);
                let _ = writeln!(csv, "{},{k},{},{},{},{},{d:e},{s:e}", name.as_str(), p.x[0], p.x[1], p.xi[0], p.xi[1]);
            }
        }
        out.metric("max_energy_drift", drift);
        out.metric("max_symplecticity_defect", sympl);
        out.metric("min_accepted_starts", fewest as f64);
        out.artifact("flow_conservation.csv", csv);
        Ok(out)
    }
}

fn cutoff_params(chart: &MetricChart, center: &[f64], r_inner: f64, r_outer: f64, params: &[f64]) -> Result<DiffeoParams> {
    let n = chart.n();
    if center.len() != n || params.len() != n + n * n {
        return Err(LabError::Config(format!("center needs {n} and params {} entries", n + n * n)));
    }
    let p = DiffeoParams::from_flat(params, Cutoff::in_chart(chart, center.to_vec(), r_inner, r_outer));
    p.validate()?;
    Ok(p)
}

/// `p_{g'} = p_g ∘ τ` at random phase points and `τ ∘ Φ'_t = Φ_t ∘ τ` along
/// random orbits, for the pullback `g'` of the scenario model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PullbackCorrespondence {
    pub center: Vec<f64>,
    pub r_inner: f64,
    pub r_outer: f64,
    /// Flat `(a, b)` in the order `a_1..a_n, b_11, b_12, …`.
    pub params: Vec<f64>,
    pub points: usize,
    pub orbits: usize,
    pub horizon: f64,
    pub samples: usize,
    pub tol: f64,
}

impl Default for PullbackCorrespondence {
    fn default() -> Self {
        Self {
            center: vec![0.5, 0.2],
            r_inner: 0.3,
            r_outer: 0.7,
            params: vec![0.01, 0.02, 0.05, -0.03, 0.02, 0.04],
            points: 1000,
            orbits: 20,
            horizon: 3.0,
            samples: 30,
            tol: 1e-12,
        }
    }
}

impl PullbackCorrespondence {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let chart = ctx.chart(op)?;
        let params = cutoff_params(chart, &self.center, self.r_inner, self.r_outer, &self.params)?;
        let g2 = pullback_metric(chart, &params)?;
        let n = chart.n();
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let box_r = 1.2 * self.r_outer;
        let mut symbol_err = 0.0f64;
        let mut used = 0;
        while used < self.points {
            let x: Vec<f64> = self.center.iter().map(|c| c + rng.gen_range(-box_r..box_r)).collect();
            let xi: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let z = PhasePoint::new(x, xi);
            if !chart.contains(&z.x) {
                continue;
            }
            used += 1;
            let lhs = g2.symbol(&z)?;
            let rhs = chart.symbol(&tau_f(&params, &z)?)?;
            symbol_err = symbol_err.max((lhs - rhs).abs());
        }
        let starts: Vec<PhasePoint> = (0..4 * self.orbits)
            .map(|_| {
                let x: Vec<f64> = self.center.iter().map(|c| c + rng.gen_range(-self.r_inner..self.r_inner)).collect();
                let d = random_direction(&mut rng, n);
                unit_energy(&g2, x, d)
            })
            .collect::<Result<_>>()?;
        let errs: Vec<Option<f64>> = starts
            .par_iter()
            .map(|z| {
                let a = trajectory(&g2, z, self.horizon, self.tol, false);
                let b = trajectory(chart, &tau_f(&params, z)?, self.horizon, self.tol, false);
                let (a, b) = match (a, b) {
                    (Ok(a), Ok(b)) if a.exit_time.is_none() && b.exit_time.is_none() => (a, b),
                    (Err(LabError::ChartExit { .. }), _) | (_, Err(LabError::ChartExit { .. })) | (Ok(_), Ok(_)) => {
                        return Ok(None)
                    }
                    (Err(e), _) | (_, Err(e)) => return Err(e),
                };
                let mut worst = 0.0f64;
                for k in 0..=self.samples {
                    let t = self.horizon * k as f64 / self.samples as f64;
                    let mapped = tau_f(&params, &a.phase(t))?;
                    worst = worst.max(chart.phase_distance(&mapped, &b.phase(t)));
                }
                Ok(Some(worst))
            })
            .collect::<Result<_>>()?;
        let orbit_errs: Vec<f64> = errs.into_iter().flatten().take(self.orbits).collect();
        let mut out = OpOutput::default();
        out.metric("symbol_error", symbol_err);
        out.metric("orbit_error", orbit_errs.iter().copied().fold(0.0, f64::max));
        out.metric("orbits_compared", orbit_errs.len() as f64);
        Ok(out)
    }
}

/// Analytic parameter Jacobian of `τ_F` at zero parameters against central
/// differences, at random points inside the cutoff with `|ξ| ∈ [0.5, 2]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamJacobian {
    pub center: Vec<f64>,
    pub r_inner: f64,
    pub r_outer: f64,
    pub points: usize,
    pub h: f64,
}

impl Default for ParamJacobian {
    fn default() -> Self {
        Self { center: vec![1.0, 2.0], r_inner: 0.5, r_outer: 1.0, points: 100, h: 1e-6 }
    }
}

impl ParamJacobian {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let chart = ctx.chart(op)?;
        let n = chart.n();
        let m = n + n * n;
        let cutoff = Cutoff::in_chart(chart, self.center.clone(), self.r_inner, self.r_outer);
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
        let mut csv = String::from("k,x1,x2,xi1,xi2,fd_error,rank\n");
        let (mut worst, mut min_rank) = (0.0f64, usize::MAX);
        for k in 0..self.points {
            let off = random_direction(&mut rng, n);
            let r = 0.9 * self.r_inner * rng.gen_range(0.0f64..1.0).sqrt();
            let x: Vec<f64> = self.center.iter().zip(&off).map(|(c, o)| c + r * o).collect();
            let mag = rng.gen_range(0.5..2.0);
            let xi: Vec<f64> = random_direction(&mut rng, n).iter().map(|v| mag * v).collect();
            let p = PhasePoint::new(x, xi);
            let jac = tau_f_param_jacobian(&cutoff, &p)?;
            let mut err = 0.0f64;
            for col in 0..m {
                let mut e = vec![0.0; m];
                e[col] = self.h;
                let plus = tau_f(&DiffeoParams::from_flat(&e, cutoff.clone()), &p)?.to_state();
                e[col] = -self.h;
                let minus = tau_f(&DiffeoParams::from_flat(&e, cutoff.clone()), &p)?.to_state();
                for r in 0..2 * n {
                    err = err.max(((plus[r] - minus[r]) / (2.0 * self.h) - jac[(r, col)]).abs());
                }
            }
            let rk = rank(&jac, 1e-12);
            worst = worst.max(err);
            min_rank = min_rank.min(rk);
            let _ = writeln!(csv, "{k},{},{},{},{},{err:e},{rk}", p.x[0], p.x[1], p.xi[0], p.xi[1]);
        }
        let zero = PhasePoint::new(self.center.clone(), vec![0.0; n]);
        let refused = matches!(tau_f_param_jacobian(&cutoff, &zero), Err(LabError::RankDeficient(_)));
        let mut out = OpOutput::default();
        out.metric("max_fd_error", worst);
        out.metric("min_rank_deficit", (2 * n) as f64 - min_rank as f64);
        out.flag("zero_section_refused", refused);
        out.artifact("param_jacobian.csv", csv);
        Ok(out)
    }
}

/// Conormal returns of the scenario Σ compared with expected return times.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReturnsScan {
    pub horizon: f64,
    pub returns: ReturnOptions,
    /// Return times every event must match.
    pub expected: Vec<f64>,
    /// Times at which closed events are expected.
    pub expected_closed: Vec<f64>,
    pub match_tol: f64,
    pub rank_defects: bool,
}

impl Default for ReturnsScan {
    fn default() -> Self {
        Self {
            horizon: 7.0,
            returns: ReturnOptions { grid: 8, ..ReturnOptions::default() },
            expected: Vec::new(),
            expected_closed: Vec::new(),
            match_tol: 1e-6,
            rank_defects: false,
        }
    }
}

/// Max over `want` of the distance to the nearest of `have` (∞ if `have` is empty).
fn worst_match(want: &[f64], have: &[f64]) -> f64 {
    want.iter()
        .map(|w| have.iter().map(|h| (h - w).abs()).fold(f64::INFINITY, f64::min))
        .fold(0.0, f64::max)
}

impl ReturnsScan {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let chart = ctx.chart(op)?;
        let (_, sigma) = ctx.sigma(op)?;
        let events = find_returns(sigma, chart, self.horizon, &self.returns)?;
        let times: Vec<f64> = events.iter().map(|e| e.t_return).collect();
        let closed: Vec<f64> = events.iter().filter(|e| e.is_closed).map(|e| e.t_return).collect();
        let unexpected = times.iter().filter(|t| self.expected.iter().all(|w| (*t - w).abs() > self.match_tol)).count();
        let ranks: Vec<Option<usize>> = if self.rank_defects {
            events
                .par_iter()
                .map(|e| {
                    e.is_closed
                        .then(|| poincare_rank_defect(chart, &e.start.phase, e.t_return).map(|r| r.0))
                        .transpose()
                })
                .collect::<Result<_>>()?
        } else {
            vec![None; events.len()]
        };
        let mut out = OpOutput::default();
        out.metric("event_count", events.len() as f64);
        out.metric("closed_count", closed.len() as f64);
        out.metric("time_error", worst_match(&self.expected, &times));
        out.metric("closed_time_error", worst_match(&self.expected_closed, &closed));
        out.metric("unexpected_events", unexpected as f64);
        out.metric("max_defect", events.iter().map(|e| e.transversality_defect).fold(0.0, f64::max));
        if self.rank_defects {
            let min_rank = ranks.iter().flatten().min().map_or(f64::NAN, |r| *r as f64);
            out.metric("min_rank_defect", min_rank);
        }
        out.artifact("returns.csv", returns_csv(&events, &ranks));
        Ok(out)
    }
}

/// Search for a small diffeomorphism that opens the first closed conormal branch.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Separation {
    pub horizon: f64,
    pub returns: ReturnOptions,
    pub separation: SeparationOptions,
}

impl Default for Separation {
    fn default() -> Self {
        Self {
            horizon: 7.0,
            returns: ReturnOptions { grid: 4, with_defect: false, ..ReturnOptions::default() },
            separation: SeparationOptions { directions: 8, window_samples: 5, ..SeparationOptions::default() },
        }
    }
}

impl Separation {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let chart = ctx.chart(op)?;
        let (_, sigma) = ctx.sigma(op)?;
        let event = find_returns(sigma, chart, self.horizon, &self.returns)?
            .into_iter()
            .filter(|e| e.is_closed)
            .min_by(|a, b| a.t_return.total_cmp(&b.t_return))
            .ok_or_else(|| LabError::SearchFailed("no closed conormal branch within the horizon".into()))?;
        let rep = separate_closed_geodesic(sigma, chart, &event, &self.separation)?;
        let mut out = OpOutput::default();
        out.flag("separated", rep.separated);
        out.metric("norm", rep.norm);
        out.metric("closure_gap_before", rep.before.closure_gap);
        out.metric("closure_gap_after", rep.after.closure_gap);
        out.metric("doubled_closure_gap", rep.doubled.as_ref().map_or(f64::NAN, |d| d.closure_gap));
        out.metric("residual_at_start_after", rep.after.residual_at_start);
        out.json("separation.json", &rep)?;
        Ok(out)
    }
}

/// Integrate one orbit of the scenario model and dump it on a uniform time grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowTrajectory {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub t: f64,
    pub samples: usize,
    pub tol: f64,
    /// Rescale `ξ` to unit energy first.
    pub unit_energy: bool,
}

impl Default for FlowTrajectory {
    fn default() -> Self {
        Self { x: vec![0.0, 0.0], xi: vec![1.0, 0.0], t: 10.0, samples: 200, tol: 1e-10, unit_energy: true }
    }
}

impl FlowTrajectory {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let chart = ctx.chart(op)?;
        let p0 = if self.unit_energy {
            unit_energy(chart, self.x.clone(), self.xi.clone())?
        } else {
            PhasePoint::new(self.x.clone(), self.xi.clone())
        };
        let traj = trajectory(chart, &p0, self.t, self.tol, true)?;
        let t_end = traj.exit_time.unwrap_or(self.t);
        let n = chart.n();
        let mut csv = String::from("t");
        for i in 1..=n {
            let _ = write!(csv, ",x{i}");
        }
        for i in 1..=n {
            let _ = write!(csv, ",xi{i}");
        }
        csv.push_str(",energy\n");
        let e0 = chart.symbol(&p0)?;
        let mut drift = 0.0f64;
        for k in 0..=self.samples {
            let t = t_end * k as f64 / self.samples.max(1) as f64;
            let p = traj.phase(t);
            let e = chart.symbol(&p)?;
            drift = drift.max((e - e0).abs());
            let _ = write!(csv, "{t:.12e}");
            for v in p.x.iter().chain(&p.xi) {
                let _ = write!(csv, ",{v:.15e}");
            }
            let _ = writeln!(csv, ",{e:.15e}");
        }
        let jac = traj.jacobian(t_end).expect("trajectory carries the jet");
        let mut out = OpOutput::default();
        out.metric("t_end", t_end);
        out.flag("left_chart", traj.exit_time.is_some());
        out.metric("energy_drift", drift);
        out.metric("symplecticity_defect", symplecticity_defect(&jac));
        out.artifact("trajectory.csv", csv);
        Ok(out)
    }
}

/// Transversality defects of all conormal returns up to the horizon.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Transversality {
    pub horizon: f64,
    pub returns: ReturnOptions,
    /// Returns with defect at least this are reported transversal.
    pub delta_tr: f64,
}

impl Default for Transversality {
    fn default() -> Self {
        Self { horizon: 7.0, returns: ReturnOptions { grid: 8, ..ReturnOptions::default() }, delta_tr: 1e-4 }
    }
}

impl Transversality {
    pub(crate) fn run(&self, ctx: &Context, op: &str) -> Result<OpOutput> {
        let chart = ctx.chart(op)?;
        let (_, sigma) = ctx.sigma(op)?;
        let opts = ReturnOptions { with_defect: true, ..self.returns.clone() };
        let events = find_returns(sigma, chart, self.horizon, &opts)?;
        let mut csv = String::from("t_return,sigma,conormal_residual,transversality_defect,transversal,is_closed\n");
        for e in &events {
            let s: Vec<String> = e.start.sigma_param.iter().map(|v| format!("{v:.12e}")).collect();
            let _ = writeln!(
                csv,
                "{:.12e},{},{:.6e},{:.6e},{},{}",
                e.t_return,
                s.join(" "),
                e.conormal_residual,
                e.transversality_defect,
                e.transversality_defect >= self.delta_tr,
                e.is_closed
            );
        }
        let defects = events.iter().map(|e| e.transversality_defect);
        let mut out = OpOutput::default();
        out.metric("event_count", events.len() as f64);
        out.metric("min_defect", defects.clone().fold(f64::INFINITY, f64::min));
        out.metric("max_defect", defects.fold(0.0, f64::max));
        out.metric(
            "non_transversal_count",
            events.iter().filter(|e| e.transversality_defect < self.delta_tr).count() as f64,
        );
        out.artifact("transversality.csv", csv);
        Ok(out)
    }
}
