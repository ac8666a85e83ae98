//! Localizing a conformal perturbation on the tail of a looping orbit and
//! using it to make the return transversal.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::profiles::{build_bumps, BumpTriple, ProfileSum, ALPHA, DEFAULT_ORDER};
use super::response::endpoint_jacobian;
use super::{conformal_chart, ConformalParams};
use crate::charts::{fermi_chart, FermiChart, Flat, MetricChart, PhasePoint, ScalarField};
use crate::conormal::{find_returns, transversality_defect, ReturnEvent, ReturnOptions, Submanifold};
use crate::error::{LabError, Result};
use crate::flow::{trajectory, DEFAULT_TOL};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailOptions {
    /// Initial tail length as a fraction of the return time; halved on failure.
    pub fraction: f64,
    pub min_fraction: f64,
    /// Sampling step of the closure and self-intersection scans.
    pub grid_dt: f64,
    pub closure_tol: f64,
    /// Tube radius as a fraction of the clearance to the rest of the orbit.
    pub tube_fraction: f64,
    pub order: usize,
    pub tol: f64,
}

impl Default for TailOptions {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            min_fraction: 0.02,
            grid_dt: 1e-2,
            closure_tol: 1e-6,
            tube_fraction: 0.5,
            order: DEFAULT_ORDER,
            tol: DEFAULT_TOL,
        }
    }
}

/// Map from normalized tail coordinates `X` to the ambient chart.
#[derive(Debug, Clone)]
pub enum TailMap {
    /// `x = origin + m X` (flat tail in a Euclidean-normalized frame).
    Affine {
        origin: Vec<f64>,
        m: DMatrix<f64>,
        m_inv: DMatrix<f64>,
        ambient: MetricChart,
    },
    Fermi(FermiChart),
}

impl TailMap {
    pub fn to_tail(&self, x: &[f64]) -> Option<Vec<f64>> {
        match self {
            TailMap::Affine { origin, m_inv, ambient, .. } => {
                let d = DVector::from_vec(ambient.delta(x, origin));
                Some((m_inv * d).as_slice().to_vec())
            }
            TailMap::Fermi(fc) => fc.inverse(x),
        }
    }

    /// `∂x/∂X`.
    pub fn dmap(&self, xt: &[f64]) -> Option<DMatrix<f64>> {
        match self {
            TailMap::Affine { m, .. } => Some(m.clone()),
            TailMap::Fermi(fc) => fc.map(xt).ok().map(|(_, j)| j * fc.length()),
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, TailMap::Affine { .. })
    }
}

/// A scalar field given in tail coordinates, read in the ambient chart.
#[derive(Debug, Clone)]
pub struct TransferredField {
    pub map: TailMap,
    pub f: ProfileSum,
}

impl TransferredField {
    fn local(&self, x: &[f64]) -> Option<Vec<f64>> {
        let xt = self.map.to_tail(x)?;
        (xt[0] > 0.0 && xt[0] < 1.0).then_some(xt)
    }
}

impl ScalarField for TransferredField {
    fn value(&self, x: &[f64]) -> f64 {
        self.local(x).map(|xt| self.f.value(&xt)).unwrap_or(0.0)
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let Some(xt) = self.local(x) else { return vec![0.0; n] };
        let Some(j) = self.map.dmap(&xt) else { return vec![0.0; n] };
        let g = DVector::from_vec(self.f.grad(&xt));
        match j.transpose().lu().solve(&g) {
            Some(v) => v.as_slice().to_vec(),
            None => vec![0.0; n],
        }
    }

    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let Some(xt) = self.local(x) else { return DMatrix::zeros(n, n) };
        match &self.map {
            TailMap::Affine { m_inv, .. } => m_inv.transpose() * self.f.hess(&xt) * m_inv,
            TailMap::Fermi(_) => {
                let h = 1e-5;
                let mut out = DMatrix::zeros(n, n);
                for j in 0..n {
                    let mut p = x.to_vec();
                    let mut q = x.to_vec();
                    p[j] += h;
                    q[j] -= h;
                    let (gp, gq) = (self.grad(&p), self.grad(&q));
                    for i in 0..n {
                        out[(i, j)] = (gp[i] - gq[i]) / (2.0 * h);
                    }
                }
                (&out + out.transpose()) * 0.5
            }
        }
    }
}

/// Tail segment of a looping orbit with its normalized chart and bumps.
#[derive(Debug, Clone)]
pub struct LoopTail {
    pub t_start: f64,
    pub t_end: f64,
    /// Ambient length of the tail.
    pub length: f64,
    /// Smallest sampled distance from the inner tail to the rest of the orbit.
    pub margin: f64,
    pub closest_pass: [f64; 2],
    /// Tube radius in normalized coordinates.
    pub tube_radius: f64,
    /// Normalized coordinates: the axis is `t ↦ t e₁`, `t ∈ [0, 1]`.
    pub chart: MetricChart,
    pub map: TailMap,
    pub bumps: BumpTriple,
}

fn unit_start(chart: &MetricChart, event: &ReturnEvent) -> Result<(PhasePoint, f64)> {
    let e = chart.symbol(&event.start.phase)?;
    if !(e > 0.0) {
        return Err(LabError::InvalidParams("start covector has zero energy".into()));
    }
    Ok((event.start.phase.scale_xi(1.0 / e.sqrt()), event.t_return * e.sqrt()))
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc < fd { (c, fc) } else { (d, fd) }
}

/// Chooses a simple tail of the orbit of `event`, builds a Fermi chart on it
/// and the bump triple in that chart.
pub fn target_loop_tail(
    chart: &MetricChart,
    _sigma: &dyn Submanifold,
    event: &ReturnEvent,
    opts: &TailOptions,
) -> Result<LoopTail> {
    if event.is_closed {
        return Err(LabError::Refused("return closes up; use the diffeomorphism separation".into()));
    }
    let (p0, t_ret) = unit_start(chart, event)?;
    let traj = trajectory(chart, &p0, t_ret, opts.tol, false)?;
    if let Some(t) = traj.exit_time {
        return Err(LabError::Refused(format!("orbit leaves the chart at t = {t}")));
    }
    let dt = opts.grid_dt;
    let steps = (t_ret / dt).ceil() as usize;
    let times: Vec<f64> = (0..=steps).map(|k| k as f64 * t_ret / steps as f64).collect();
    let phases: Vec<PhasePoint> = times.iter().map(|&t| traj.phase(t)).collect();

    // The orbit must not close up before the return.
    let dist: Vec<f64> = phases.iter().map(|p| chart.phase_distance(p, &p0)).collect();
    let h = t_ret / steps as f64;
    for k in 1..steps {
        if times[k] < 10.0 * h || !(dist[k] <= dist[k - 1] && dist[k] <= dist[k + 1]) || dist[k] > 0.1 {
            continue;
        }
        let (tm, dm) = golden_min(
            |t| chart.phase_distance(&traj.phase(t), &p0),
            times[k - 1],
            times[k + 1],
            60,
        );
        if dm <= opts.closure_tol {
            return Err(LabError::Refused(format!("orbit closes at t = {tm} before the return")));
        }
    }

    let metric_dist = |a: &[f64], b: &[f64]| {
        let d = DVector::from_vec(chart.delta(a, b));
        d.dot(&(chart.metric_tensor(a) * &d)).max(0.0).sqrt()
    };
    let mut fraction = opts.fraction;
    while fraction >= opts.min_fraction {
        let len = fraction * t_ret;
        let t_a = t_ret - len;
        let (lo, hi) = (t_a + ALPHA * len, t_ret - ALPHA * len);
        let mut margin = f64::INFINITY;
        let mut pass = [0.0; 2];
        for (i, ti) in times.iter().enumerate() {
            if *ti < lo || *ti > hi {
                continue;
            }
            for (j, tj) in times.iter().enumerate() {
                if (ti - tj).abs() < ALPHA * len {
                    continue;
                }
                let d = metric_dist(&phases[i].x, &phases[j].x);
                if d < margin {
                    margin = d;
                    pass = [*ti, *tj];
                }
            }
        }
        let clearance = margin - h;
        if clearance > 0.0 {
            let r_amb = (opts.tube_fraction * clearance).min(0.5 * ALPHA * len);
            let start = traj.phase(t_a);
            let fc = fermi_chart(chart, &start, len, r_amb)?;
            let tube_radius = r_amb / len;
            let bumps = build_bumps(tube_radius, opts.order)?;
            let (map, tail_chart) = tail_frame(chart, &fc, tube_radius)?;
            return Ok(LoopTail {
                t_start: t_a,
                t_end: t_ret,
                length: len,
                margin,
                closest_pass: pass,
                tube_radius,
                chart: tail_chart,
                map,
                bumps,
            });
        }
        fraction *= 0.5;
    }
    Err(LabError::Refused("no simple tail found: the orbit passes too close to itself".into()))
}

/// Affine frame when the Fermi map is affine with identity normalized metric,
/// otherwise the Fermi chart itself.
fn tail_frame(ambient: &MetricChart, fc: &FermiChart, tube: f64) -> Result<(TailMap, MetricChart)> {
    let n = ambient.n();
    let l = fc.length();
    let zero = vec![0.0; n];
    let (origin, j0) = fc.map(&zero)?;
    let m = j0 * l;
    let m_inv = m.clone().try_inverse().ok_or(LabError::RankDeficient("singular Fermi frame".into()))?;
    let mut affine = true;
    let mut samples = Vec::new();
    for a in [0.0, 0.5, 1.0] {
        for b in [-1.0, 0.0, 1.0] {
            let mut xt = zero.clone();
            xt[0] = a;
            for v in xt.iter_mut().skip(1) {
                *v = b * tube;
            }
            samples.push(xt);
        }
    }
    for xt in &samples {
        let (y, j) = fc.map(xt)?;
        let lin = DVector::from_vec(origin.clone()) + &m * DVector::from_column_slice(xt);
        let dy = ambient.delta(lin.as_slice(), &y);
        let dj = (j * l - &m).abs().max();
        let gn = &m_inv * ambient.ginv(&y) * m_inv.transpose() * (l * l) - DMatrix::identity(n, n);
        if dy.iter().any(|v| v.abs() > 1e-9) || dj > 1e-8 || gn.abs().max() > 1e-9 {
            affine = false;
            break;
        }
    }
    if affine {
        let map = TailMap::Affine { origin, m, m_inv, ambient: ambient.clone() };
        Ok((map, MetricChart::new(Flat { periods: vec![None; n] })))
    } else {
        Ok((TailMap::Fermi(fc.clone()), MetricChart::new(fc.clone())))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreakLoopOptions {
    pub s_max: f64,
    /// Returns with defect above this are already transversal.
    pub delta_tr: f64,
    pub defect_target: f64,
    /// Half-width of the Σ-parameter window rescanned around the old start.
    pub window: f64,
    /// Events within this time of the old return are compared.
    pub t_window: f64,
    pub halvings: usize,
    pub tail: TailOptions,
    pub returns: ReturnOptions,
}

impl Default for BreakLoopOptions {
    fn default() -> Self {
        Self {
            s_max: 0.1,
            delta_tr: 1e-4,
            defect_target: 1e-3,
            window: 0.3,
            t_window: 0.25,
            halvings: 3,
            tail: TailOptions::default(),
            returns: ReturnOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Attempt {
    pub s: Vec<f64>,
    pub events: usize,
    /// Minimum defect among nearby returns; `None` when no return remains nearby.
    pub defect: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BreakLoopReport {
    pub success: bool,
    pub params: ConformalParams,
    pub s_norm: f64,
    pub defect_before: f64,
    pub defect_after: Option<f64>,
    pub events_after: Vec<ReturnEvent>,
    pub tail_start: f64,
    pub tail_length: f64,
    pub tail_margin: f64,
    pub tube_radius: f64,
    pub affine_tail: bool,
    pub jacobian_sigma_min: f64,
    pub attempts: Vec<Attempt>,
}

/// Ambient chart of `(1 + f_s) p` with `f_s` built in the tail chart.
pub fn perturbed_ambient(chart: &MetricChart, tail: &LoopTail, s: &[f64]) -> Result<MetricChart> {
    let f = tail.bumps.field(chart.n(), s)?;
    let bound = f.sup_bound();
    conformal_chart(chart, Arc::new(TransferredField { map: tail.map.clone(), f }), bound)
}

/// Returns near the old event in the perturbed chart and their smallest defect.
pub fn nearby_returns(
    sigma: &dyn Submanifold,
    chart: &MetricChart,
    event: &ReturnEvent,
    window: f64,
    t_window: f64,
    opts: &ReturnOptions,
) -> Result<(Vec<ReturnEvent>, Option<f64>)> {
    let c = event.start.sigma_param[0];
    let ro = ReturnOptions { window: Some((c - window, c + window)), with_defect: true, ..opts.clone() };
    let events: Vec<ReturnEvent> = find_returns(sigma, chart, event.t_return + t_window, &ro)?
        .into_iter()
        .filter(|e| {
            let same_side = e.start.normal_coeffs.iter().zip(&event.start.normal_coeffs).map(|(a, b)| a * b).sum::<f64>() > 0.0;
            same_side && (e.t_return - event.t_return).abs() <= t_window
        })
        .collect();
    let d = events.iter().map(|e| e.transversality_defect).fold(None, |m: Option<f64>, v| {
        Some(m.map_or(v, |m| m.min(v)))
    });
    Ok((events, d))
}

/// Perturbs `(1 + f_s) p` on the tail of a non-transversal looping return so
/// that the nearby returns become transversal.
pub fn break_loop(
    chart: &MetricChart,
    sigma: &dyn Submanifold,
    event: &ReturnEvent,
    opts: &BreakLoopOptions,
) -> Result<(MetricChart, BreakLoopReport)> {
    let n = chart.n();
    let defect_before = transversality_defect(sigma, chart, event)?;
    if defect_before > opts.delta_tr {
        return Err(LabError::InvalidParams(format!("return is already transversal (defect {defect_before})")));
    }
    let tail = target_loop_tail(chart, sigma, event, &opts.tail)?;
    let jac = endpoint_jacobian(&tail.chart, &tail.bumps, 1.0)?;
    // Transverse rows (x', ξ') against the transverse controls (s_{n+1..}, s_{2..n}).
    let m = 2 * (n - 1);
    let mut rows = Vec::with_capacity(m);
    rows.extend(1..n);
    rows.extend(n + 1..2 * n);
    let a = DMatrix::from_fn(m, m, |r, c| jac.matrix[(rows[r], c + 2)]);
    let a_lu = a.lu();
    let mut directions = Vec::new();
    // ξ' targets first, then x'.
    for k in (n - 1..m).chain(0..n - 1) {
        for sign in [1.0, -1.0] {
            let mut target = DVector::zeros(m);
            target[k] = sign;
            let c = a_lu
                .solve(&target)
                .ok_or(LabError::RankDeficient("transverse endpoint block is singular".into()))?;
            let mut s = vec![0.0; 2 * n - 1];
            for (i, v) in c.iter().enumerate() {
                s[jac.column_order[i + 1] - 1] = *v;
            }
            let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            directions.push(s.iter().map(|v| v / norm).collect::<Vec<_>>());
        }
    }

    let mut attempts = Vec::new();
    let mut try_s = |s: Vec<f64>| -> Result<(Vec<ReturnEvent>, Option<f64>, Vec<f64>)> {
        let pc = perturbed_ambient(chart, &tail, &s)?;
        let (events, d) = nearby_returns(sigma, &pc, event, opts.window, opts.t_window, &opts.returns)?;
        attempts.push(Attempt { s: s.clone(), events: events.len(), defect: d });
        Ok((events, d, s))
    };
    let ok = |d: Option<f64>| d.is_some_and(|v| v >= opts.defect_target);
    let mut best: Option<(Vec<ReturnEvent>, Option<f64>, Vec<f64>)> = None;
    let mut success = false;
    for dir in &directions {
        let s: Vec<f64> = dir.iter().map(|v| v * opts.s_max).collect();
        let r = try_s(s)?;
        if ok(r.1) {
            success = true;
            best = Some(r);
            let mut mag = opts.s_max;
            for _ in 0..opts.halvings {
                mag *= 0.5;
                let r = try_s(dir.iter().map(|v| v * mag).collect())?;
                if !ok(r.1) {
                    break;
                }
                best = Some(r);
            }
            break;
        }
        let better = match (&best, r.1) {
            (None, _) => true,
            (Some((_, bd, _)), Some(d)) => bd.is_none_or(|b| d > b),
            _ => false,
        };
        if better {
            best = Some(r);
        }
    }
    let (events_after, defect_after, s) = best.expect("at least one attempt");
    let new_chart = perturbed_ambient(chart, &tail, &s)?;
    let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let report = BreakLoopReport {
        success,
        params: ConformalParams { s, epsilon: 1.0, bumps: tail.bumps.clone() },
        s_norm,
        defect_before,
        defect_after,
        events_after,
        tail_start: tail.t_start,
        tail_length: tail.length,
        tail_margin: tail.margin,
        tube_radius: tail.tube_radius,
        affine_tail: tail.map.is_affine(),
        jacobian_sigma_min: jac.sigma_min,
        attempts,
    };
    Ok((new_chart, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams};
    use crate::conormal::CoordinateSlice;
    use std::f64::consts::PI;

    fn flat_setup() -> (MetricChart, CoordinateSlice, ReturnEvent) {
        let c = make_model(ModelName::FlatTorus, &ModelParams::default()).unwrap().chart;
        let sigma = CoordinateSlice::torus_horizontal(0.0, 2.0 * PI, PI);
        let ro = ReturnOptions { grid: 8, window: Some((1.0, 1.2)), ..ReturnOptions::default() };
        let ev = find_returns(&sigma, &c, 3.3, &ro)
            .unwrap()
            .into_iter()
            .find(|e| (e.t_return - PI).abs() < 1e-6 && !e.is_closed)
            .unwrap();
        (c, sigma, ev)
    }

    #[test]
    fn flat_tail_is_affine() {
        let (c, sigma, ev) = flat_setup();
        let tail = target_loop_tail(&c, &sigma, &ev, &TailOptions::default()).unwrap();
        assert!(tail.map.is_affine());
        assert!((tail.length - 0.2 * PI).abs() < 1e-12);
        assert!((tail.margin - ALPHA * tail.length).abs() < 0.02);
        let x = [ev.start.phase.x[0] + 0.001, PI - 0.1];
        let xt = tail.map.to_tail(&x).unwrap();
        let TailMap::Affine { origin, m, .. } = &tail.map else { unreachable!() };
        let back = DVector::from_vec(origin.clone()) + m * DVector::from_vec(xt);
        assert!(c.delta(back.as_slice(), &x).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn transferred_field_matches_tail_field() {
        let (c, sigma, ev) = flat_setup();
        let tail = target_loop_tail(&c, &sigma, &ev, &TailOptions::default()).unwrap();
        let s = [0.05, -0.03, 0.02];
        let f = tail.bumps.field(2, &s).unwrap();
        let tf = TransferredField { map: tail.map.clone(), f: f.clone() };
        let TailMap::Affine { origin, m, .. } = &tail.map else { unreachable!() };
        let xt = [0.45, 0.3 * tail.tube_radius];
        let x = (DVector::from_vec(origin.clone()) + m * DVector::from_column_slice(&xt)).as_slice().to_vec();
        assert!((tf.value(&x) - f.value(&xt)).abs() < 1e-12);
        let h = 1e-6;
        let g = tf.grad(&x);
        for i in 0..2 {
            let mut p = x.clone();
            let mut q = x.clone();
            p[i] += h;
            q[i] -= h;
            let fd = (tf.value(&p) - tf.value(&q)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "{fd} {}", g[i]);
        }
    }

    #[test]
    fn zero_perturbation_keeps_defect() {
        let (c, sigma, ev) = flat_setup();
        let tail = target_loop_tail(&c, &sigma, &ev, &TailOptions::default()).unwrap();
        let pc = perturbed_ambient(&c, &tail, &[0.0; 3]).unwrap();
        let ro = ReturnOptions { grid: 4, ..ReturnOptions::default() };
        let (events, d) = nearby_returns(&sigma, &pc, &ev, 0.05, 0.25, &ro).unwrap();
        assert!(!events.is_empty());
        assert!((d.unwrap() - ev.transversality_defect).abs() < 1e-8);
    }

    #[test]
    fn refuses_closed_returns() {
        let c = make_model(ModelName::FlatTorus, &ModelParams::default()).unwrap().chart;
        let sigma = CoordinateSlice::torus_horizontal(0.0, 2.0 * PI, 2.0 * PI);
        let ro = ReturnOptions { grid: 4, window: Some((1.0, 1.2)), ..ReturnOptions::default() };
        let ev = find_returns(&sigma, &c, 6.5, &ro).unwrap().into_iter().find(|e| e.is_closed).unwrap();
        assert!(matches!(target_loop_tail(&c, &sigma, &ev, &TailOptions::default()), Err(LabError::Refused(_))));
    }
}
