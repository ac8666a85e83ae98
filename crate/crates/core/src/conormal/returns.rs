use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{conormal_lift, refit, transversality_defect, ConormalPoint, ReturnEvent, Submanifold};
use crate::charts::{MetricChart, PhasePoint};
use crate::error::{LabError, Result};
use crate::flow::{trajectory, DEFAULT_TOL};
use crate::linalg::brent;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReturnOptions {
    /// Number of Σ-parameter samples (each with both normal directions).
    pub grid: usize,
    /// Restrict the parameter scan to this interval.
    pub window: Option<(f64, f64)>,
    pub t_min: f64,
    pub eps_event: f64,
    /// Residuals in `(eps_event, degraded_max]` are reported with the degraded flag.
    pub degraded_max: f64,
    pub sample_step: f64,
    pub tol: f64,
    pub closed_tol: f64,
    pub cluster_dt: f64,
    pub cluster_phase: f64,
    pub with_defect: bool,
}

impl Default for ReturnOptions {
    fn default() -> Self {
        Self {
            grid: 48,
            window: None,
            t_min: 1e-3,
            eps_event: 1e-8,
            degraded_max: 1e-5,
            sample_step: 0.05,
            tol: DEFAULT_TOL,
            closed_tol: 1e-6,
            cluster_dt: 1e-3,
            cluster_phase: 1e-2,
            with_defect: true,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Crossing {
    pub(crate) t: f64,
    pub(crate) r: f64,
    pub(crate) end: ConormalPoint,
    /// Unwrapped terminal phase.
    pub(crate) phase: PhasePoint,
}

/// Jumps of the event function larger than this are periodic wraps, not crossings.
const WRAP_JUMP: f64 = 1.0;

pub(crate) fn crossings(
    sigma: &dyn Submanifold,
    chart: &MetricChart,
    start: &PhasePoint,
    horizon: f64,
    opts: &ReturnOptions,
) -> Result<Vec<Crossing>> {
    let traj = trajectory(chart, start, horizon, opts.tol, false)?;
    let t_end = traj.t_end;
    if t_end <= opts.t_min {
        return Ok(Vec::new());
    }
    let m = ((t_end - opts.t_min) / opts.sample_step).ceil().max(1.0) as usize;
    let dist = |t: f64| sigma.locate(chart, &traj.phase(t).x).map(|v| v.1).unwrap_or(f64::NAN);
    let mut out = Vec::new();
    let mut ta = opts.t_min;
    let mut da = dist(ta);
    for k in 1..=m {
        let tb = opts.t_min + (t_end - opts.t_min) * k as f64 / m as f64;
        let db = dist(tb);
        if da.signum() != db.signum() && (da - db).abs() < WRAP_JUMP && da.is_finite() && db.is_finite() {
            if let Some(t) = brent(dist, ta, tb, 1e-14, 200) {
                let phase = traj.phase(t);
                if let Some((end, r)) = refit(sigma, chart, &phase) {
                    out.push(Crossing { t, r, end, phase });
                }
            }
        }
        ta = tb;
        da = db;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Candidate {
    dir: usize,
    pos: f64,
    start: ConormalPoint,
    c: Crossing,
}

/// Return branches of the unit conormal bundle up to horizon `t_max`.
pub fn find_returns(
    sigma: &dyn Submanifold,
    chart: &MetricChart,
    t_max: f64,
    opts: &ReturnOptions,
) -> Result<Vec<ReturnEvent>> {
    if !(t_max > 0.0) {
        return Err(LabError::InvalidParams("horizon must be positive".into()));
    }
    if sigma.codim() != 1 || sigma.dim() != 1 {
        return Err(LabError::Unsupported(
            "return search is implemented for curves in surfaces (codimension 1)".into(),
        ));
    }
    if opts.grid < 2 {
        return Err(LabError::InvalidParams("grid must have at least 2 points".into()));
    }
    let period = sigma.param_periods()[0];
    let (lo, hi, wrap) = match opts.window {
        Some((a, b)) => (a, b, false),
        None => {
            let (a, b) = sigma.grid_bounds()[0];
            let full = period.map(|p| ((b - a) - p).abs() < 1e-12).unwrap_or(false);
            (a, b, full)
        }
    };
    let n = opts.grid;
    let node = |i: f64| if wrap { lo + (hi - lo) * i / n as f64 } else { lo + (hi - lo) * i / (n - 1) as f64 };
    let dirs = [1.0, -1.0];

    let starts: Vec<(usize, usize, ConormalPoint)> = dirs
        .iter()
        .enumerate()
        .flat_map(|(d, &sgn)| (0..n).map(move |i| (d, i, sgn)))
        .map(|(d, i, sgn)| conormal_lift(sigma, chart, &[node(i as f64)], &[sgn], true).map(|c| (d, i, c)))
        .collect::<Result<_>>()?;
    let cross: Vec<Vec<Crossing>> = starts
        .par_iter()
        .map(|(_, _, s)| crossings(sigma, chart, &s.phase, t_max, opts))
        .collect::<Result<_>>()?;

    let mut cands: Vec<Candidate> = Vec::new();
    for ((d, i, s), cs) in starts.iter().zip(&cross) {
        for c in cs {
            if c.r.abs() <= opts.eps_event {
                cands.push(Candidate { dir: *d, pos: *i as f64, start: s.clone(), c: c.clone() });
            }
        }
    }
    // Sign changes of the residual between neighbouring starts.
    let pairs: Vec<(usize, usize, usize)> = (0..dirs.len())
        .flat_map(|d| {
            let last = if wrap { n } else { n - 1 };
            (0..last).map(move |i| (d, i, (i + 1) % n))
        })
        .collect();
    let refined: Vec<Vec<Candidate>> = pairs
        .par_iter()
        .map(|&(d, i, j)| {
            let ca = &cross[d * n + i];
            let cb = &cross[d * n + j];
            let mut out = Vec::new();
            for a in ca.iter().filter(|c| c.r.abs() > opts.eps_event) {
                let best = cb
                    .iter()
                    .filter(|c| c.r.abs() > opts.eps_event)
                    .min_by(|x, y| (x.t - a.t).abs().partial_cmp(&(y.t - a.t).abs()).unwrap());
                let Some(b) = best else { continue };
                if (b.t - a.t).abs() > 0.5 || a.r.signum() == b.r.signum() {
                    continue;
                }
                let sa = node(i as f64);
                let sb = if j == 0 && i == n - 1 { node(n as f64) } else { node(j as f64) };
                if let Some(c) = refine(sigma, chart, dirs[d], (sa, a), (sb, b), t_max, opts) {
                    out.push(Candidate { dir: d, pos: i as f64 + 0.5, start: c.0, c: c.1 });
                }
            }
            out
        })
        .collect();
    cands.extend(refined.into_iter().flatten());
    cands.retain(|c| c.c.t > opts.t_min && c.c.t <= t_max && c.c.r.abs() <= opts.degraded_max);

    let reps = cluster(&cands, chart, n, wrap, opts);
    let mut events: Vec<ReturnEvent> = reps
        .into_iter()
        .map(|k| {
            let c = &cands[k];
            ReturnEvent {
                t_return: c.c.t,
                start: c.start.clone(),
                end: c.c.end.clone(),
                conormal_residual: c.c.r.abs(),
                transversality_defect: f64::NAN,
                is_closed: chart.phase_distance(&c.c.phase, &c.start.phase) <= opts.closed_tol,
                degraded: c.c.r.abs() > opts.eps_event,
            }
        })
        .collect();
    if opts.with_defect {
        for e in events.iter_mut() {
            e.transversality_defect = transversality_defect(sigma, chart, e)?;
        }
    }
    events.sort_by(|a, b| {
        a.t_return
            .partial_cmp(&b.t_return)
            .unwrap()
            .then(a.start.sigma_param[0].partial_cmp(&b.start.sigma_param[0]).unwrap())
    });
    Ok(events)
}

type Side<'a> = (f64, &'a Crossing);

fn refine(
    sigma: &dyn Submanifold,
    chart: &MetricChart,
    sgn: f64,
    a: Side,
    b: Side,
    t_max: f64,
    opts: &ReturnOptions,
) -> Option<(ConormalPoint, Crossing)> {
    let (sa, ca) = a;
    let (sb, cb) = b;
    let horizon = (ca.t.max(cb.t) + 0.5).min(t_max + 0.5);
    let eval = |s: f64| -> Option<(ConormalPoint, Crossing)> {
        let st = conormal_lift(sigma, chart, &[s], &[sgn], true).ok()?;
        let w = (s - sa) / (sb - sa);
        let guess = ca.t + w * (cb.t - ca.t);
        let cs = crossings(sigma, chart, &st.phase, horizon, opts).ok()?;
        let c = cs
            .into_iter()
            .min_by(|x, y| (x.t - guess).abs().partial_cmp(&(y.t - guess).abs()).unwrap())?;
        ((c.t - guess).abs() <= 0.5).then_some((st, c))
    };
    let root = brent(|s| eval(s).map(|v| v.1.r).unwrap_or(f64::NAN), sa, sb, 1e-15, 100)?;
    let (st, c) = eval(root)?;
    Some((st, c))
}

/// Single-linkage clustering; returns indices of residual-minimizing representatives.
fn cluster(cands: &[Candidate], chart: &MetricChart, n: usize, wrap: bool, opts: &ReturnOptions) -> Vec<usize> {
    let m = cands.len();
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(p: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while p[r] != r {
            r = p[r];
        }
        let mut k = i;
        while p[k] != r {
            let nx = p[k];
            p[k] = r;
            k = nx;
        }
        r
    }
    for i in 0..m {
        for j in i + 1..m {
            let (a, b) = (&cands[i], &cands[j]);
            if (a.c.t - b.c.t).abs() > opts.cluster_dt {
                continue;
            }
            let mut dp = (a.pos - b.pos).abs();
            if wrap {
                dp = dp.min(n as f64 - dp);
            }
            let adjacent = a.dir == b.dir && dp <= 1.0;
            if adjacent || chart.phase_distance(&a.start.phase, &b.start.phase) <= opts.cluster_phase {
                let (ra, rb) = (find(&mut parent, i), find(&mut parent, j));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut best: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for i in 0..m {
        let r = find(&mut parent, i);
        let e = best.entry(r).or_insert(i);
        if cands[i].c.r.abs() < cands[*e].c.r.abs() {
            *e = i;
        }
    }
    best.into_values().collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LoopingEstimate {
    pub fraction: f64,
    /// 95% Wilson score half-width.
    pub half_width: f64,
    pub hits: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// Monte Carlo fraction of unit conormal directions returning conormally by `t_max`.
pub fn looping_fraction(
    sigma: &dyn Submanifold,
    chart: &MetricChart,
    t_max: f64,
    n_samples: usize,
    seed: u64,
    opts: &ReturnOptions,
) -> Result<LoopingEstimate> {
    if n_samples == 0 {
        return Err(LabError::InvalidParams("n_samples must be at least 1".into()));
    }
    if sigma.codim() != 1 || sigma.dim() != 1 {
        return Err(LabError::Unsupported("looping fraction needs a codimension-1 curve".into()));
    }
    let (lo, hi) = opts.window.unwrap_or(sigma.grid_bounds()[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(f64, f64)> = (0..n_samples)
        .map(|_| (rng.gen_range(lo..hi), if rng.gen_bool(0.5) { 1.0 } else { -1.0 }))
        .collect();
    let hits: Vec<bool> = draws
        .par_iter()
        .map(|&(s, sgn)| {
            let st = conormal_lift(sigma, chart, &[s], &[sgn], true)?;
            let cs = crossings(sigma, chart, &st.phase, t_max, opts)?;
            Ok(cs.iter().any(|c| c.r.abs() <= opts.eps_event))
        })
        .collect::<Result<_>>()?;
    let k = hits.iter().filter(|h| **h).count();
    let nf = n_samples as f64;
    let p = k as f64 / nf;
    let z = 1.959_963_984_540_054;
    let denom = 1.0 + z * z / nf;
    let half = z * (p * (1.0 - p) / nf + z * z / (4.0 * nf * nf)).sqrt() / denom;
    Ok(LoopingEstimate {
        fraction: p,
        half_width: half,
        hits: k,
        n_samples,
        seed,
    })
}

/// Columns: `branch_id,t_return,residual,defect,is_closed,rank_defect`.
pub fn returns_csv(events: &[ReturnEvent], rank_defects: &[Option<usize>]) -> String {
    let mut out = String::from("branch_id,t_return,residual,defect,is_closed,rank_defect\n");
    for (i, e) in events.iter().enumerate() {
        let rd = rank_defects.get(i).copied().flatten().map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{i},{},{:e},{:e},{},{rd}",
            e.t_return, e.conormal_residual, e.transversality_defect, e.is_closed
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams};
    use crate::conormal::SigmaSpec;
    use crate::flow::integrate_unwrapped;
    use std::f64::consts::PI;

    fn torus() -> (MetricChart, std::sync::Arc<dyn Submanifold>) {
        let c = make_model(ModelName::FlatTorus, &ModelParams::default()).unwrap().chart;
        let s = SigmaSpec::TorusLine { value: 0.0, period: 2.0 * PI, sheet_period: 2.0 * PI }.build();
        (c, s)
    }

    fn opts(grid: usize) -> ReturnOptions {
        ReturnOptions { grid, ..Default::default() }
    }

    #[test]
    fn torus_short_horizon_is_empty() {
        let (c, s) = torus();
        assert!(find_returns(s.as_ref(), &c, 5.0, &opts(8)).unwrap().is_empty());
    }

    #[test]
    fn torus_branches_at_two_pi_multiples() {
        let (c, s) = torus();
        let ev = find_returns(s.as_ref(), &c, 13.0, &opts(8)).unwrap();
        assert_eq!(ev.len(), 4);
        for e in &ev {
            let k = (e.t_return / (2.0 * PI)).round();
            assert!(k == 1.0 || k == 2.0);
            assert!((e.t_return - 2.0 * PI * k).abs() < 1e-8);
            assert!(e.is_closed);
            assert!(e.transversality_defect < 1e-9);
            // re-validation
            let p = integrate_unwrapped(&c, &e.start.phase, e.t_return, DEFAULT_TOL).unwrap();
            assert!(c.phase_distance(&p, &e.end.phase) < 1e-7);
        }
    }

    #[test]
    fn sphere_great_circle_branches() {
        let c = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let s = SigmaSpec::PolarGreatCircle { u_max: 1.2 }.build();
        let ev = find_returns(s.as_ref(), &c, 7.0, &opts(8)).unwrap();
        let mut times: Vec<f64> = ev.iter().map(|e| e.t_return).collect();
        times.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
        assert_eq!(times.len(), 2);
        assert!((times[0] - PI).abs() < 1e-8 && (times[1] - 2.0 * PI).abs() < 1e-8);
        assert!(ev.iter().all(|e| e.transversality_defect < 1e-6));
    }

    #[test]
    fn codim_two_is_unsupported() {
        let (c, _) = torus();
        let p = SigmaSpec::Point { x: vec![0.0, 0.0] }.build();
        assert!(matches!(find_returns(p.as_ref(), &c, 7.0, &opts(8)), Err(LabError::Unsupported(_))));
    }

    #[test]
    fn looping_fraction_examples() {
        let (c, s) = torus();
        let est = looping_fraction(s.as_ref(), &c, 7.0, 16, 7, &ReturnOptions::default()).unwrap();
        assert_eq!(est.fraction, 1.0);
        let sph = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let g = SigmaSpec::PolarGreatCircle { u_max: 1.2 }.build();
        let est = looping_fraction(g.as_ref(), &sph, 4.0, 16, 7, &ReturnOptions::default()).unwrap();
        assert_eq!(est.fraction, 1.0);
        assert!(est.half_width > 0.0 && est.half_width < 0.2);
    }
}
