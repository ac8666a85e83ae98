//! Isometry-class perturbations: the cutoff affine vector-field family, its
//! time-1 flow, the induced canonical transformation and pulled-back metrics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charts::{wrap_delta, DiffeoMap, MetricChart, PhasePoint, Pullback};
use crate::conormal::returns::crossings;
use crate::conormal::{conormal_lift, ReturnEvent, ReturnOptions, Submanifold};
use crate::error::{LabError, Result};
use crate::linalg::{expm_with_integral, rank};
use crate::ode::dopri5_fixed;

/// Smooth radial cutoff: 1 on `|w| ≤ r_inner`, 0 on `|w| ≥ r_outer`, where
/// `w` is the (periodically wrapped) offset from `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cutoff {
    pub center: Vec<f64>,
    pub r_inner: f64,
    pub r_outer: f64,
    #[serde(default)]
    pub periods: Vec<Option<f64>>,
}

impl Cutoff {
    pub fn in_chart(chart: &MetricChart, center: Vec<f64>, r_inner: f64, r_outer: f64) -> Self {
        Self {
            center,
            r_inner,
            r_outer,
            periods: chart.periods(),
        }
    }

    pub fn offset(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .enumerate()
            .map(|(i, (a, c))| match self.periods.get(i).copied().flatten() {
                Some(p) => wrap_delta(a - c, p),
                None => a - c,
            })
            .collect()
    }

    /// χ and its gradient with respect to `x`.
    pub fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let w = self.offset(x);
        let r = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n = w.len();
        if r <= self.r_inner {
            return (1.0, vec![0.0; n]);
        }
        if r >= self.r_outer {
            return (0.0, vec![0.0; n]);
        }
        let d = self.r_outer - self.r_inner;
        let s = (self.r_outer - r) / d;
        let (phi, dphi) = smooth_step(s);
        let k = -dphi / (d * r);
        (phi, w.iter().map(|v| k * v).collect())
    }
}

fn bump_edge(s: f64) -> (f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0)
    } else {
        let f = (-1.0 / s).exp();
        (f, f / (s * s))
    }
}

/// `f(s) / (f(s) + f(1-s))` with `f(s) = e^{-1/s}`, and its derivative.
fn smooth_step(s: f64) -> (f64, f64) {
    let (f, df) = bump_edge(s);
    let (g, dg) = bump_edge(1.0 - s);
    let q = f + g;
    (f / q, (df * g + f * dg) / (q * q))
}

/// Parameters `(a, b)` with `b[i][j] = b_ij`; the field is
/// `χ(x) Σ_j (a_j + Σ_i b_ij w_i) ∂_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffeoParams {
    pub a: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub cutoff: Cutoff,
}

impl DiffeoParams {
    pub fn zero(cutoff: Cutoff) -> Self {
        let n = cutoff.center.len();
        Self {
            a: vec![0.0; n],
            b: vec![vec![0.0; n]; n],
            cutoff,
        }
    }

    /// From a flat vector `(a, b_11, b_12, …)` in lexicographic `(i, j)` order.
    pub fn from_flat(v: &[f64], cutoff: Cutoff) -> Self {
        let n = cutoff.center.len();
        Self {
            a: v[..n].to_vec(),
            b: (0..n).map(|i| v[n + i * n..n + (i + 1) * n].to_vec()).collect(),
            cutoff,
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.a.clone();
        for row in &self.b {
            v.extend_from_slice(row);
        }
        v
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::from_flat(&self.flat().iter().map(|v| v * c).collect::<Vec<_>>(), self.cutoff.clone())
    }

    /// The matrix `B` with `B_{j,i} = b_ij`.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let n = self.a.len();
        DMatrix::from_fn(n, n, |j, i| self.b[i][j])
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cutoff.center.len();
        if self.a.len() != n {
            return Err(LabError::Dimension { expected: n, got: self.a.len() });
        }
        if self.b.len() != n || self.b.iter().any(|r| r.len() != n) {
            return Err(LabError::InvalidParams(format!("b must be {n}x{n}")));
        }
        let c = &self.cutoff;
        if !(c.r_inner > 0.0 && c.r_inner < c.r_outer) {
            return Err(LabError::InvalidParams("cutoff needs 0 < r_inner < r_outer".into()));
        }
        if c.periods.iter().flatten().any(|p| 2.0 * c.r_outer >= *p) {
            return Err(LabError::InvalidParams("cutoff support wraps around a period".into()));
        }
        Ok(())
    }
}

/// `F(a, b)(x)`.
pub fn field_f(params: &DiffeoParams, x: &[f64]) -> Vec<f64> {
    let (chi, _) = params.cutoff.eval(x);
    if chi == 0.0 {
        return vec![0.0; x.len()];
    }
    let w = DVector::from_vec(params.cutoff.offset(x));
    let v = DVector::from_column_slice(&params.a) + params.b_matrix() * w;
    v.iter().map(|c| chi * c).collect()
}

fn field_and_jacobian(params: &DiffeoParams, bm: &DMatrix<f64>, x: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let (chi, dchi) = params.cutoff.eval(x);
    if chi == 0.0 {
        return (DVector::zeros(n), DMatrix::zeros(n, n));
    }
    let w = DVector::from_vec(params.cutoff.offset(x));
    let v = DVector::from_column_slice(&params.a) + bm * w;
    let dm = bm * chi + &v * DVector::from_vec(dchi).transpose();
    (v * chi, dm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowRegime {
    ClosedForm,
    Numerical,
}

const FALLBACK_STEPS: usize = 64;

/// Whether the whole time-1 orbit of `x` stays where `χ ≡ 1`.
pub fn in_closed_form_regime(params: &DiffeoParams, x: &[f64]) -> bool {
    let w = params.cutoff.offset(x);
    let rw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ra = params.a.iter().map(|v| v * v).sum::<f64>().sqrt();
    rw + ra + params.b_matrix().norm() * (rw + 1.0) <= params.cutoff.r_inner
}

/// Time-1 map of the affine field `a + Bw` (valid inside the inner radius).
pub fn time_one_closed_form(params: &DiffeoParams, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let bm = params.b_matrix();
    let (e, t) = expm_with_integral(&bm);
    closed_form_with(&e, &t, params, x)
}

fn closed_form_with(e: &DMatrix<f64>, t: &DMatrix<f64>, params: &DiffeoParams, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let w = DVector::from_vec(params.cutoff.offset(x));
    let shift = e * &w + t * DVector::from_column_slice(&params.a) - &w;
    (x.iter().zip(shift.iter()).map(|(a, b)| a + b).collect(), e.clone())
}

/// Time-1 map of the full cutoff field with its Jacobian, by fixed-step
/// integration of the field and its variational equation.
pub fn time_one_numerical(params: &DiffeoParams, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = x.len();
    let bm = params.b_matrix();
    let mut y0 = x.to_vec();
    y0.extend(DMatrix::<f64>::identity(n, n).iter());
    let rhs = |_t: f64, y: &[f64], out: &mut [f64]| {
        let (v, dm) = field_and_jacobian(params, &bm, &y[..n]);
        out[..n].copy_from_slice(v.as_slice());
        let j = DMatrix::from_column_slice(n, n, &y[n..]);
        out[n..].copy_from_slice((dm * j).as_slice());
    };
    let y = dopri5_fixed(rhs, 0.0, &y0, 1.0, FALLBACK_STEPS);
    let j = DMatrix::from_column_slice(n, n, &y[n..]);
    let r0 = norm(&params.cutoff.offset(x));
    let r1 = norm(&params.cutoff.offset(&y[..n]));
    if y.iter().any(|v| !v.is_finite()) || (r0 < params.cutoff.r_outer && r1 >= params.cutoff.r_outer) {
        return Err(LabError::Refused("perturbation flow escapes the cutoff support".into()));
    }
    if j.determinant() <= 0.0 {
        return Err(LabError::Refused("perturbation too large: flow Jacobian degenerates".into()));
    }
    Ok((y[..n].to_vec(), j))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

/// `exp(F(a, b))(x)` and its Jacobian, with the regime that produced them.
pub fn time_one_map(params: &DiffeoParams, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>, FlowRegime)> {
    params.validate()?;
    if in_closed_form_regime(params, x) {
        let (y, j) = time_one_closed_form(params, x);
        Ok((y, j, FlowRegime::ClosedForm))
    } else {
        let (y, j) = time_one_numerical(params, x)?;
        Ok((y, j, FlowRegime::Numerical))
    }
}

/// `τ_F(x, ξ) = (κ(x), dκ(x)^{-T} ξ)` with `κ = exp(F(a, b))`.
pub fn tau_f(params: &DiffeoParams, p: &PhasePoint) -> Result<PhasePoint> {
    let (y, j, _) = time_one_map(params, &p.x)?;
    Ok(PhasePoint::new(y, covector_push(&j, &p.xi)?))
}

fn covector_push(j: &DMatrix<f64>, xi: &[f64]) -> Result<Vec<f64>> {
    let jt = j
        .transpose()
        .lu()
        .solve(&DVector::from_column_slice(xi))
        .ok_or_else(|| LabError::RankDeficient("diffeomorphism Jacobian is singular".into()))?;
    Ok(jt.iter().copied().collect())
}

/// Analytic `d_{(a,b)} τ_{F(a,b)}(x, ξ)` at `(a, b) = 0`, columns ordered as
/// `a_1..a_n, b_11, b_12, …, b_nn`.
pub fn tau_f_param_jacobian(cutoff: &Cutoff, p: &PhasePoint) -> Result<DMatrix<f64>> {
    let n = p.dim();
    if cutoff.center.len() != n {
        return Err(LabError::Dimension { expected: cutoff.center.len(), got: n });
    }
    let w = cutoff.offset(&p.x);
    if norm(&w) > cutoff.r_inner {
        return Err(LabError::InvalidParams("phase point lies outside the inner cutoff radius".into()));
    }
    let mut m = DMatrix::zeros(2 * n, n + n * n);
    for i in 0..n {
        m[(i, i)] = 1.0;
    }
    for i in 0..n {
        for j in 0..n {
            let col = n + i * n + j;
            m[(j, col)] = w[i];
            m[(n + i, col)] = -p.xi[j];
        }
    }
    if rank(&m, 1e-12) < 2 * n {
        return Err(LabError::RankDeficient("parameter Jacobian of tau_F needs a nonzero covector".into()));
    }
    Ok(m)
}

/// `κ = exp(F(a, b))` as a chart map; the affine-region exponentials are cached.
#[derive(Debug, Clone)]
pub struct TimeOneMap {
    params: DiffeoParams,
    exp_b: DMatrix<f64>,
    t_b: DMatrix<f64>,
}

impl TimeOneMap {
    pub fn new(params: DiffeoParams) -> Result<Self> {
        params.validate()?;
        let (exp_b, t_b) = expm_with_integral(&params.b_matrix());
        Ok(Self { params, exp_b, t_b })
    }
}

impl DiffeoMap for TimeOneMap {
    fn apply(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        if in_closed_form_regime(&self.params, x) {
            return closed_form_with(&self.exp_b, &self.t_b, &self.params, x);
        }
        time_one_numerical(&self.params, x)
            .unwrap_or_else(|_| (vec![f64::NAN; x.len()], DMatrix::from_element(x.len(), x.len(), f64::NAN)))
    }
}

/// The chart of `exp(F(a, b))* g`.
pub fn pullback_metric(chart: &MetricChart, params: &DiffeoParams) -> Result<MetricChart> {
    if params.cutoff.center.len() != chart.n() {
        return Err(LabError::Dimension { expected: chart.n(), got: params.cutoff.center.len() });
    }
    let map = TimeOneMap::new(params.clone())?;
    let (_, j) = map.apply(&params.cutoff.center);
    if !j.iter().all(|v| v.is_finite()) || j.determinant() <= 0.0 {
        return Err(LabError::Refused("perturbation too large: flow Jacobian degenerates".into()));
    }
    Ok(MetricChart::new(Pullback {
        base: chart.clone(),
        kappa: Arc::new(map),
    }))
}

/// `κ(Σ)` for `κ = exp(F(a, b))`, seen in the unperturbed metric. By the
/// orbit correspondence its conormal returns under `g` are those of `Σ` under `κ*g`.
#[derive(Debug)]
pub struct MovedSubmanifold<'a> {
    pub inner: &'a dyn Submanifold,
    forward: TimeOneMap,
    backward: TimeOneMap,
}

impl<'a> MovedSubmanifold<'a> {
    pub fn new(inner: &'a dyn Submanifold, params: &DiffeoParams) -> Result<Self> {
        Ok(Self {
            inner,
            forward: TimeOneMap::new(params.clone())?,
            backward: TimeOneMap::new(params.scaled(-1.0))?,
        })
    }
}

impl Submanifold for MovedSubmanifold<'_> {
    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn embed(&self, s: &[f64]) -> Vec<f64> {
        self.forward.apply(&self.inner.embed(s)).0
    }
    fn tangent_frame(&self, s: &[f64]) -> DMatrix<f64> {
        let (_, j) = self.forward.apply(&self.inner.embed(s));
        j * self.inner.tangent_frame(s)
    }
    fn param_periods(&self) -> Vec<Option<f64>> {
        self.inner.param_periods()
    }
    fn grid_bounds(&self) -> Vec<(f64, f64)> {
        self.inner.grid_bounds()
    }
    fn locate(&self, chart: &MetricChart, x: &[f64]) -> Option<(Vec<f64>, f64)> {
        let y = self.backward.apply(x).0;
        if y.iter().any(|v| !v.is_finite()) {
            return None;
        }
        self.inner.locate(chart, &y)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparationOptions {
    pub directions: usize,
    pub scales: usize,
    pub max_scale: f64,
    pub seed: u64,
    pub r_inner: f64,
    pub r_outer: f64,
    /// Half-width of the Σ-parameter window around the old branch.
    pub window: f64,
    pub window_samples: usize,
    /// Required closure gap of the old branch after perturbation.
    pub threshold: f64,
    pub tol: f64,
}

impl Default for SeparationOptions {
    fn default() -> Self {
        Self {
            directions: 64,
            scales: 8,
            max_scale: 0.1,
            seed: 7,
            r_inner: 0.5,
            r_outer: 1.0,
            window: 0.2,
            window_samples: 9,
            threshold: 1e-4,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BranchProbe {
    /// Smallest phase distance between a start near the old branch and its return near the old period.
    pub closure_gap: f64,
    pub gap_param: Vec<f64>,
    /// Tangential residual of the return from the old start parameter itself.
    pub residual_at_start: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparationReport {
    pub separated: bool,
    pub params: DiffeoParams,
    pub norm: f64,
    pub before: BranchProbe,
    pub after: BranchProbe,
    /// The same direction at twice the magnitude (checked on the moved submanifold).
    pub doubled: Option<BranchProbe>,
    pub candidates_evaluated: usize,
}

fn probe_start(
    sigma: &dyn Submanifold,
    chart: &MetricChart,
    s: &[f64],
    coeffs: &[f64],
    t_ret: f64,
    tol: f64,
) -> Option<(f64, f64)> {
    let start = conormal_lift(sigma, chart, s, coeffs, true).ok()?;
    let opts = ReturnOptions {
        t_min: (t_ret - 0.5).max(1e-3),
        tol,
        ..Default::default()
    };
    let cs = crossings(sigma, chart, &start.phase, t_ret + 0.5, &opts).ok()?;
    cs.iter()
        .filter(|c| (c.t - t_ret).abs() <= 0.5)
        .map(|c| {
            let end = PhasePoint::new(chart.reduce(&c.phase.x), c.phase.xi.clone());
            (chart.phase_distance(&end, &start.phase), c.r)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Closure gap of the branch through `event` in `chart`, minimized over a
/// window of nearby start parameters.
pub fn probe_branch(
    sigma: &dyn Submanifold,
    chart: &MetricChart,
    event: &ReturnEvent,
    window: f64,
    samples: usize,
    tol: f64,
) -> BranchProbe {
    let s0 = event.start.sigma_param[0];
    let coeffs = &event.start.normal_coeffs;
    let t_ret = event.t_return;
    let gap_at = |s: f64| probe_start(sigma, chart, &[s], coeffs, t_ret, tol).map(|v| v.0).unwrap_or(f64::INFINITY);
    let m = samples.max(3);
    let grid: Vec<f64> = (0..m).map(|k| s0 - window + 2.0 * window * k as f64 / (m - 1) as f64).collect();
    let vals: Vec<f64> = grid.par_iter().map(|s| gap_at(*s)).collect();
    let kbest = (0..m).min_by(|a, b| vals[*a].total_cmp(&vals[*b])).unwrap();
    let (mut best_s, mut best) = (grid[kbest], vals[kbest]);
    if best.is_finite() {
        let (mut lo, mut hi) = (grid[kbest.saturating_sub(1)], grid[(kbest + 1).min(m - 1)]);
        let gr = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = hi - gr * (hi - lo);
        let mut d = lo + gr * (hi - lo);
        let (mut fc, mut fd) = (gap_at(c), gap_at(d));
        for _ in 0..30 {
            if fc < fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - gr * (hi - lo);
                fc = gap_at(c);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + gr * (hi - lo);
                fd = gap_at(d);
            }
        }
        for (s, f) in [(c, fc), (d, fd)] {
            if f < best {
                best = f;
                best_s = s;
            }
        }
    }
    let residual_at_start = probe_start(sigma, chart, &[s0], coeffs, t_ret, tol).map(|v| v.1).unwrap_or(f64::NAN);
    BranchProbe {
        closure_gap: best,
        gap_param: vec![best_s],
        residual_at_start,
    }
}

/// Search small `(a, b)` so that, under the pulled-back metric, the closed
/// conormal branch through `event` no longer closes.
pub fn separate_closed_geodesic(
    sigma: &dyn Submanifold,
    chart: &MetricChart,
    event: &ReturnEvent,
    opts: &SeparationOptions,
) -> Result<SeparationReport> {
    if !event.is_closed {
        return Err(LabError::InvalidParams("event is not a closed return".into()));
    }
    if sigma.dim() != 1 {
        return Err(LabError::Unsupported("separation search needs a one-parameter Σ".into()));
    }
    let n = chart.n();
    let cutoff = Cutoff::in_chart(chart, event.start.phase.x.clone(), opts.r_inner, opts.r_outer);
    DiffeoParams::zero(cutoff.clone()).validate()?;
    let probe = |c: &MetricChart| probe_branch(sigma, c, event, opts.window, opts.window_samples, opts.tol);
    let probe_moved = |params: &DiffeoParams| -> Option<BranchProbe> {
        let moved = MovedSubmanifold::new(sigma, params).ok()?;
        Some(probe_branch(&moved, chart, event, opts.window, opts.window_samples, opts.tol))
    };
    let before = probe(chart);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dirs: Vec<Vec<f64>> = (0..opts.directions)
        .map(|_| {
            let v: Vec<f64> = (0..n + n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let l = norm(&v);
            v.iter().map(|c| c / l).collect()
        })
        .collect();
    let mut evaluated = 0;
    let mut best: Option<(DiffeoParams, BranchProbe)> = None;
    for k in (0..opts.scales).rev() {
        let scale = opts.max_scale * 0.5f64.powi(k as i32);
        let results: Vec<Option<(DiffeoParams, BranchProbe)>> = dirs
            .par_iter()
            .map(|d| {
                let v: Vec<f64> = d.iter().map(|c| c * scale).collect();
                let params = DiffeoParams::from_flat(&v, cutoff.clone());
                let p = probe_moved(&params)?;
                Some((params, p))
            })
            .collect();
        evaluated += results.len();
        let top = results
            .into_iter()
            .flatten()
            .filter(|(_, p)| p.closure_gap.is_finite())
            .max_by(|a, b| a.1.closure_gap.total_cmp(&b.1.closure_gap));
        if let Some((params, p)) = top {
            let done = p.closure_gap > opts.threshold;
            if best.as_ref().is_none_or(|b| done || p.closure_gap > b.1.closure_gap) {
                best = Some((params, p));
            }
            if done {
                break;
            }
        }
    }
    let (params, _) = best.ok_or_else(|| LabError::SearchFailed("no admissible perturbation candidate".into()))?;
    let after = probe(&pullback_metric(chart, &params)?);
    let separated = after.closure_gap > opts.threshold;
    let doubled = probe_moved(&params.scaled(2.0));
    Ok(SeparationReport {
        separated,
        norm: params.norm(),
        params,
        before,
        after,
        doubled,
        candidates_evaluated: evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams};
    use crate::conormal::{find_returns, SigmaSpec};
    use std::f64::consts::PI;

    fn flat() -> MetricChart {
        make_model(ModelName::FlatTorus, &ModelParams::default()).unwrap().chart
    }

    fn cut(c: &MetricChart) -> Cutoff {
        Cutoff::in_chart(c, vec![1.0, 2.0], 0.5, 1.0)
    }

    #[test]
    fn field_examples() {
        let c = cut(&flat());
        let z = DiffeoParams::zero(c.clone());
        assert_eq!(field_f(&z, &[1.1, 2.1]), vec![0.0, 0.0]);
        let mut p = z.clone();
        p.a = vec![1.0, 0.0];
        assert_eq!(field_f(&p, &[1.2, 2.1]), vec![1.0, 0.0]);
        assert_eq!(field_f(&p, &[2.5, 2.0]), vec![0.0, 0.0]);
        let mut q = z.clone();
        q.b[0][0] = 1.0;
        let f = field_f(&q, &[1.3, 2.1]);
        assert!((f[0] - 0.3).abs() < 1e-15 && f[1] == 0.0);
        let mut r = z;
        r.b[0][1] = 1.0;
        let f = field_f(&r, &[1.3, 2.1]);
        assert!(f[0] == 0.0 && (f[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn cutoff_gradient_matches_differences() {
        let c = cut(&flat());
        for x in [[1.6, 2.3], [0.4, 1.8], [1.0, 2.9]] {
            let (_, g) = c.eval(&x);
            for k in 0..2 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[k] += h;
                xm[k] -= h;
                let fd = (c.eval(&xp).0 - c.eval(&xm).0) / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn translation_and_identity() {
        let c = cut(&flat());
        let z = DiffeoParams::zero(c.clone());
        let p = PhasePoint::new(vec![1.1, 2.2], vec![0.3, -0.7]);
        assert_eq!(tau_f(&z, &p).unwrap(), p);
        let mut t = z;
        t.a = vec![0.01, -0.02];
        let q = tau_f(&t, &p).unwrap();
        assert!((q.x[0] - 1.11).abs() < 1e-14 && (q.x[1] - 2.18).abs() < 1e-14);
        assert_eq!(q.xi, p.xi);
    }

    #[test]
    fn regimes_agree() {
        let c = cut(&flat());
        let p = DiffeoParams::from_flat(&[0.02, -0.01, 0.03, -0.02, 0.01, 0.015], c);
        for x in [[1.1, 2.05], [0.95, 1.9]] {
            assert!(in_closed_form_regime(&p, &x));
            let (y1, j1) = time_one_closed_form(&p, &x);
            let (y2, j2) = time_one_numerical(&p, &x).unwrap();
            assert!((y1[0] - y2[0]).abs() < 1e-8 && (y1[1] - y2[1]).abs() < 1e-8);
            assert!((j1 - j2).abs().max() < 1e-8);
        }
    }

    #[test]
    fn closed_form_inverse_is_negated_params() {
        let c = cut(&flat());
        let p = DiffeoParams::from_flat(&[0.02, -0.01, 0.03, -0.02, 0.01, 0.015], c);
        let q = p.scaled(-1.0);
        let z = PhasePoint::new(vec![1.05, 2.02], vec![0.4, 0.9]);
        let back = tau_f(&q, &tau_f(&p, &z).unwrap()).unwrap();
        assert!(z.x.iter().zip(&back.x).chain(z.xi.iter().zip(&back.xi)).all(|(a, b)| (a - b).abs() < 1e-10));
    }

    #[test]
    fn param_jacobian_examples() {
        let c = cut(&flat());
        let p = PhasePoint::new(vec![1.1, 2.0], vec![1.0, 0.0]);
        let m = tau_f_param_jacobian(&c, &p).unwrap();
        assert_eq!(m.view((0, 0), (2, 2)).into_owned(), DMatrix::identity(2, 2));
        assert!(m.view((2, 0), (2, 2)).iter().all(|v| *v == 0.0));
        // b_11, b_12, b_21, b_22, grouped by column j.
        let lower = m.view((2, 2), (2, 4)).into_owned();
        let perm = DMatrix::from_columns(&[lower.column(0), lower.column(2), lower.column(1), lower.column(3)]);
        assert_eq!(perm, DMatrix::from_row_slice(2, 4, &[-1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0]));
        let zero = PhasePoint::new(vec![1.1, 2.0], vec![0.0, 0.0]);
        assert!(matches!(tau_f_param_jacobian(&c, &zero), Err(LabError::RankDeficient(_))));
    }

    #[test]
    fn param_jacobian_matches_differences() {
        let c = cut(&flat());
        let p = PhasePoint::new(vec![1.2, 1.85], vec![0.6, -1.3]);
        let m = tau_f_param_jacobian(&c, &p).unwrap();
        let h = 1e-6;
        for col in 0..6 {
            let mut e = vec![0.0; 6];
            e[col] = h;
            let plus = tau_f(&DiffeoParams::from_flat(&e, c.clone()), &p).unwrap();
            e[col] = -h;
            let minus = tau_f(&DiffeoParams::from_flat(&e, c.clone()), &p).unwrap();
            let fd: Vec<f64> = plus.to_state().iter().zip(minus.to_state()).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            for r in 0..4 {
                assert!((fd[r] - m[(r, col)]).abs() < 1e-6, "col {col} row {r}");
            }
        }
    }

    #[test]
    fn pullback_symbol_identity() {
        let sphere = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let c = Cutoff::in_chart(&sphere, vec![0.5, 0.2], 0.3, 0.7);
        let p = DiffeoParams::from_flat(&[0.01, 0.02, 0.05, -0.03, 0.02, 0.04], c);
        let g2 = pullback_metric(&sphere, &p).unwrap();
        for x in [[0.5, 0.2], [0.9, 0.4], [0.1, -0.1], [2.0, 0.0]] {
            let z = PhasePoint::new(x.to_vec(), vec![0.7, -0.4]);
            let lhs = g2.symbol(&z).unwrap();
            let rhs = sphere.symbol(&tau_f(&p, &z).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-8);
        }
        let flat = flat();
        let tr = DiffeoParams::from_flat(&[0.03, -0.02, 0.0, 0.0, 0.0, 0.0], cut(&flat));
        let g3 = pullback_metric(&flat, &tr).unwrap();
        assert!((g3.ginv(&[1.1, 2.1]) - flat.ginv(&[1.1, 2.1])).abs().max() < 1e-14);
    }

    #[test]
    fn separates_flat_torus_normal() {
        let c = flat();
        let s = SigmaSpec::TorusLine { value: 0.0, period: 2.0 * PI, sheet_period: 2.0 * PI }.build();
        let ro = ReturnOptions { grid: 4, with_defect: false, ..Default::default() };
        let e = find_returns(s.as_ref(), &c, 7.0, &ro).unwrap().into_iter().find(|e| e.is_closed).unwrap();
        let opts = SeparationOptions { directions: 8, window_samples: 5, ..Default::default() };
        let rep = separate_closed_geodesic(s.as_ref(), &c, &e, &opts).unwrap();
        assert!(rep.before.closure_gap < 1e-6);
        assert!(rep.separated && rep.norm <= 0.05, "{rep:?}");
        assert!(rep.doubled.unwrap().closure_gap > opts.threshold);
    }
}
