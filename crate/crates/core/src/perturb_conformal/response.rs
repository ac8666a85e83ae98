use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use super::{conformal_chart, BumpTriple, ProfileSum};
use crate::charts::{scale_chart, MetricChart, PhasePoint, ScalarField};
use crate::error::{LabError, Result};
use crate::flow::{integrate, integrate_unwrapped, ser_matrix};
use crate::linalg::{integrate_gl, linear_fit, smallest_singular_value};
use crate::ode::{dopri5, OdeOptions};

const RESPONSE_TOL: f64 = 1e-12;
const QUAD_ORDER: usize = 128;

/// `(∂x/∂s, ∂ξ/∂s)` along the axis orbit at the sample times.
#[derive(Debug, Clone, Serialize)]
pub struct LinearResponse {
    pub times: Vec<f64>,
    pub dx_ds: Vec<Vec<f64>>,
    pub dxi_ds: Vec<Vec<f64>>,
}

impl LinearResponse {
    pub fn max_deviation(&self, other: &LinearResponse) -> (f64, f64) {
        let d = |a: &[Vec<f64>], b: &[Vec<f64>]| {
            a.iter()
                .zip(b)
                .map(|(u, v)| u.iter().zip(v).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max)
        };
        (d(&self.dx_ds, &other.dx_ds), d(&self.dxi_ds, &other.dxi_ds))
    }
}

fn axis_point(n: usize, t: f64) -> Vec<f64> {
    let mut x = vec![0.0; n];
    x[0] = t;
    x
}

fn unit(n: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[k] = 1.0;
    e
}

/// Refuses unless `(t e₁, e₁)` is the unit-time orbit from `(0, e₁)` to 1e-8.
pub fn check_axis_orbit(chart: &MetricChart) -> Result<()> {
    let n = chart.n();
    let p = integrate(chart, &PhasePoint::new(vec![0.0; n], unit(n, 0)), 1.0, RESPONSE_TOL)?;
    let err = p
        .x
        .iter()
        .zip(axis_point(n, 1.0))
        .chain(p.xi.iter().zip(unit(n, 0)))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if err > 1e-8 {
        return Err(LabError::Refused(format!("base orbit leaves the axis (deviation {err:e})")));
    }
    Ok(())
}

/// Integrates the linearized system along the axis orbit:
/// `(∂x/∂s)' = f ξ + ∂ξ/∂s`, `(∂ξ/∂s)' = −½ ∇²_x p · ∂x/∂s − ½ ∇f`.
pub fn linear_response(chart: &MetricChart, f: &dyn ScalarField, t_grid: &[f64]) -> Result<LinearResponse> {
    check_axis_orbit(chart)?;
    let n = chart.n();
    let t_end = t_grid.iter().copied().fold(0.0, f64::max);
    let rhs = |t: f64, y: &[f64], out: &mut [f64]| {
        let x = axis_point(n, t);
        let fv = f.value(&x);
        let g = f.grad(&x);
        let h = chart.d2ginv(&x);
        for i in 0..n {
            out[i] = y[n + i] + if i == 0 { fv } else { 0.0 };
            let mut acc = 0.0;
            for j in 0..n {
                acc += h[i][j][(0, 0)] * y[j];
            }
            out[n + i] = -0.5 * acc - 0.5 * g[i];
        }
    };
    let opts = OdeOptions::with_tol(RESPONSE_TOL);
    let out = dopri5(rhs, 0.0, &vec![0.0; 2 * n], t_end, &opts, true, |_, _| false)?;
    let dense = out.dense.expect("dense output requested");
    let mut dx = Vec::new();
    let mut dxi = Vec::new();
    for &t in t_grid {
        let y = if t <= 0.0 { vec![0.0; 2 * n] } else { dense.eval(t) };
        dx.push(y[..n].to_vec());
        dxi.push(y[n..].to_vec());
    }
    Ok(LinearResponse {
        times: t_grid.to_vec(),
        dx_ds: dx,
        dxi_ds: dxi,
    })
}

/// Central differences in `s` of the fully perturbed flow `½H_{(1+sf)p}` from `(0, e₁)`.
pub fn fd_response(chart: &MetricChart, f: &ProfileSum, t_grid: &[f64], h: f64) -> Result<LinearResponse> {
    let n = chart.n();
    let scaled = |c: f64| {
        let mut g = f.clone();
        for t in &mut g.terms {
            t.0 *= c;
        }
        let b = g.sup_bound();
        conformal_chart(chart, Arc::new(g), b)
    };
    let plus = scaled(h)?;
    let minus = scaled(-h)?;
    let p0 = PhasePoint::new(vec![0.0; n], unit(n, 0));
    let mut dx = Vec::new();
    let mut dxi = Vec::new();
    for &t in t_grid {
        if t <= 0.0 {
            dx.push(vec![0.0; n]);
            dxi.push(vec![0.0; n]);
            continue;
        }
        let a = integrate_unwrapped(&plus, &p0, t, RESPONSE_TOL)?;
        let b = integrate_unwrapped(&minus, &p0, t, RESPONSE_TOL)?;
        dx.push(a.x.iter().zip(&b.x).map(|(u, v)| (u - v) / (2.0 * h)).collect());
        dxi.push(a.xi.iter().zip(&b.xi).map(|(u, v)| (u - v) / (2.0 * h)).collect());
    }
    Ok(LinearResponse {
        times: t_grid.to_vec(),
        dx_ds: dx,
        dxi_ds: dxi,
    })
}

fn support(f: &ProfileSum) -> (f64, f64) {
    f.terms
        .iter()
        .filter(|(c, _)| *c != 0.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, p)| (lo.min(p.axis.lo), hi.max(p.axis.hi)))
}

/// Closed form for axis profiles with vanishing transverse gradient:
/// `∂x/∂s = ½ ∫₀ᵗ f(u e₁) du e₁`, `∂ξ/∂s = −½ f(t e₁) e₁`.
pub fn closed_form_axis(f: &ProfileSum, t: f64) -> (Vec<f64>, Vec<f64>) {
    let n = f.n;
    let (lo, hi) = support(f);
    let b = t.min(hi);
    let i = if b > lo { integrate_gl(|u| f.value(&axis_point(n, u)), lo, b, QUAD_ORDER) } else { 0.0 };
    let mut dx = vec![0.0; n];
    let mut dxi = vec![0.0; n];
    dx[0] = 0.5 * i;
    dxi[0] = -0.5 * f.value(&axis_point(n, t));
    (dx, dxi)
}

/// The explicit ε = 0 solution for profiles vanishing on the axis:
/// `∂x̃/∂s = −½ ∫₀ᵗ (t − u) ∇f(u e₁) du`, `∂ξ̃/∂s = −½ ∫₀ᵗ ∇f(u e₁) du`.
pub fn closed_form_transverse(f: &ProfileSum, t: f64) -> (Vec<f64>, Vec<f64>) {
    let n = f.n;
    let (lo, hi) = support(f);
    let b = t.min(hi);
    let mut dx = vec![0.0; n];
    let mut dxi = vec![0.0; n];
    if b > lo {
        for k in 0..n {
            dx[k] = -0.5 * integrate_gl(|u| (t - u) * f.grad(&axis_point(n, u))[k], lo, b, QUAD_ORDER);
            dxi[k] = -0.5 * integrate_gl(|u| f.grad(&axis_point(n, u))[k], lo, b, QUAD_ORDER);
        }
    }
    (dx, dxi)
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorPoint {
    pub epsilon: f64,
    pub dev_x: f64,
    pub dev_xi: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorCurve {
    pub points: Vec<ErrorPoint>,
    pub slope_x: f64,
    pub slope_xi: f64,
}

impl ErrorCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,dev_x,dev_xi\n");
        for p in &self.points {
            s.push_str(&format!("{:.6e},{:.12e},{:.12e}\n", p.epsilon, p.dev_x, p.dev_xi));
        }
        s
    }
}

/// Max over `t ∈ [0, 1]` of the deviation of the ε-scaled response from the
/// ε = 0 closed form, with log-log slopes.
pub fn epsilon_error_curve(base: &MetricChart, f: &ProfileSum, eps_list: &[f64], samples: usize) -> Result<ErrorCurve> {
    let n = base.n();
    let on_axis = (0..=200).map(|k| f.value(&axis_point(n, k as f64 / 200.0)).abs()).fold(0.0, f64::max);
    if on_axis > 1e-14 {
        return Err(LabError::InvalidParams("profile must vanish on the axis".into()));
    }
    if eps_list.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
        return Err(LabError::InvalidParams("epsilon values must lie in (0, 1]".into()));
    }
    let grid: Vec<f64> = (0..=samples).map(|k| k as f64 / samples as f64).collect();
    let (cx, cxi): (Vec<_>, Vec<_>) = grid.iter().map(|t| closed_form_transverse(f, *t)).unzip();
    let closed = LinearResponse {
        times: grid.clone(),
        dx_ds: cx,
        dxi_ds: cxi,
    };
    let points = eps_list
        .par_iter()
        .map(|&eps| {
            let chart = scale_chart(base, eps)?;
            let r = linear_response(&chart, f, &grid)?;
            let (dev_x, dev_xi) = r.max_deviation(&closed);
            Ok(ErrorPoint { epsilon: eps, dev_x, dev_xi })
        })
        .collect::<Result<Vec<_>>>()?;
    let le: Vec<f64> = points.iter().map(|p| p.epsilon.ln()).collect();
    let (slope_x, _) = linear_fit(&le, &points.iter().map(|p| p.dev_x.ln()).collect::<Vec<_>>());
    let (slope_xi, _) = linear_fit(&le, &points.iter().map(|p| p.dev_xi.ln()).collect::<Vec<_>>());
    Ok(ErrorCurve { points, slope_x, slope_xi })
}

/// `[[I_n, 0], [0, 0], [0, I_{n−1}]]` (rows `x`, `ξ₁`, `ξ'`).
pub fn s_block_pattern(n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(2 * n, 2 * n - 1);
    for i in 0..n {
        m[(i, i)] = 1.0;
    }
    for i in 1..n {
        m[(n + i, n - 1 + i)] = 1.0;
    }
    m
}

#[derive(Debug, Clone, Serialize)]
pub struct EndpointJacobian {
    pub epsilon: f64,
    /// Columns: `ξ₁`, then `s_1, s_{n+1}, …, s_{2n−1}, s_2, …, s_n`.
    #[serde(serialize_with = "ser_matrix")]
    pub matrix: DMatrix<f64>,
    /// 1-based `s` indices of columns 2.. of `matrix`.
    pub column_order: Vec<usize>,
    pub sigma_min: f64,
    pub pattern_deviation: f64,
}

impl EndpointJacobian {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for r in 0..self.matrix.nrows() {
            let row: Vec<String> = (0..self.matrix.ncols()).map(|c| format!("{:.12e}", self.matrix[(r, c)])).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Derivative of `(ξ₁, s) ↦ exp(½H_{(1+f_s)p})(0, ξ₁e₁)` at `(1, 0)` on the ε-scaled chart.
pub fn endpoint_jacobian(base: &MetricChart, bumps: &BumpTriple, epsilon: f64) -> Result<EndpointJacobian> {
    let chart = if epsilon == 1.0 { base.clone() } else { scale_chart(base, epsilon)? };
    let n = chart.n();
    let mut order = vec![1];
    order.extend(n + 1..=2 * n - 1);
    order.extend(2..=n);
    let cols: Vec<Vec<f64>> = order
        .par_iter()
        .map(|&j| {
            let f = bumps.component(n, j - 1)?;
            let r = linear_response(&chart, &f, &[1.0])?;
            let mut c = r.dx_ds[0].clone();
            c.extend_from_slice(&r.dxi_ds[0]);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    m[(0, 0)] = 1.0;
    m[(n, 0)] = 1.0;
    for (k, c) in cols.iter().enumerate() {
        for r in 0..2 * n {
            m[(r, k + 1)] = c[r];
        }
    }
    let sblock = m.view((0, 1), (2 * n, 2 * n - 1)).into_owned();
    let pattern_deviation = (sblock - s_block_pattern(n)).abs().max();
    Ok(EndpointJacobian {
        epsilon,
        sigma_min: smallest_singular_value(&m),
        matrix: m,
        column_order: order,
        pattern_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{build_bumps, AxisProfile, SeparableProfile, TubeCutoff, DEFAULT_ORDER};
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams};

    fn fermi() -> MetricChart {
        make_model(ModelName::FermiSegment, &ModelParams::default()).unwrap().chart
    }

    fn tube() -> TubeCutoff {
        TubeCutoff { r_inner: 0.1, r_outer: 0.2 }
    }

    #[test]
    fn zero_forcing_gives_zero_response() {
        let c = scale_chart(&fermi(), 0.3).unwrap();
        let off_orbit = AxisProfile::new(1.2, 1.6, vec![1.0]);
        let f = ProfileSum::single(2, SeparableProfile { axis: off_orbit, tube: tube(), linear: None });
        let r = linear_response(&c, &f, &[0.5, 1.0]).unwrap();
        assert!(r.dx_ds.iter().chain(&r.dxi_ds).flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn axis_profiles_match_closed_form() {
        let c = fermi();
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        for poly in [vec![1.0], vec![0.5, 2.0], vec![-1.0, 0.0, 4.0]] {
            let f = ProfileSum::single(2, SeparableProfile { axis: AxisProfile::new(0.15, 0.85, poly), tube: tube(), linear: None });
            for chart in [scale_chart(&c, 0.0).unwrap(), c.clone()] {
                let r = linear_response(&chart, &f, &grid).unwrap();
                for (k, t) in grid.iter().enumerate() {
                    let (dx, dxi) = closed_form_axis(&f, *t);
                    for i in 0..2 {
                        assert!((r.dx_ds[k][i] - dx[i]).abs() < 1e-8 && (r.dxi_ds[k][i] - dxi[i]).abs() < 1e-8);
                    }
                }
            }
        }
    }

    #[test]
    fn transverse_profiles_match_closed_form_at_zero_epsilon() {
        let c = scale_chart(&fermi(), 0.0).unwrap();
        let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let profiles = [
            (0.1, 0.9, vec![1.0]),
            (0.2, 0.6, vec![0.0, 1.0]),
            (0.3, 0.95, vec![2.0, -1.0]),
            (0.05, 0.5, vec![1.0, 0.0, -3.0]),
            (0.4, 0.8, vec![-0.5, 1.0, 1.0]),
        ];
        for (lo, hi, poly) in profiles {
            let f = ProfileSum::single(
                2,
                SeparableProfile { axis: AxisProfile::new(lo, hi, poly), tube: tube(), linear: Some(1) },
            );
            let r = linear_response(&c, &f, &grid).unwrap();
            for (k, t) in grid.iter().enumerate() {
                let (dx, dxi) = closed_form_transverse(&f, *t);
                for i in 0..2 {
                    assert!((r.dx_ds[k][i] - dx[i]).abs() < 1e-8 && (r.dxi_ds[k][i] - dxi[i]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn response_matches_nonlinear_differences() {
        let c = fermi();
        let b = build_bumps(0.2, DEFAULT_ORDER).unwrap();
        for j in 0..3 {
            let f = b.component(2, j).unwrap();
            let grid = [0.3, 0.7, 1.0];
            let lin = linear_response(&c, &f, &grid).unwrap();
            let fd = fd_response(&c, &f, &grid, 1e-4).unwrap();
            let (ex, exi) = lin.max_deviation(&fd);
            assert!(ex < 1e-5 && exi < 1e-5, "component {j}: {ex:e} {exi:e}");
        }
    }

    #[test]
    fn endpoint_jacobian_limit() {
        let b = build_bumps(0.2, DEFAULT_ORDER).unwrap();
        let j0 = endpoint_jacobian(&fermi(), &b, 0.0).unwrap();
        assert!(j0.pattern_deviation < 1e-8);
        assert_eq!(j0.column_order, vec![1, 3, 2]);
        assert_eq!((j0.matrix[(0, 0)], j0.matrix[(1, 0)], j0.matrix[(2, 0)], j0.matrix[(3, 0)]), (1.0, 0.0, 1.0, 0.0));
        let oracle = DMatrix::from_row_slice(4, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let smin = smallest_singular_value(&oracle);
        assert!((smin - 0.5 * (5f64.sqrt() - 1.0)).abs() < 1e-14);
        assert!((j0.sigma_min - smin).abs() < 1e-8);
        let j = endpoint_jacobian(&fermi(), &b, 0.05).unwrap();
        assert!(j.sigma_min >= 0.1);
    }

    #[test]
    fn homogeneity_column() {
        let c = fermi();
        let h = 1e-5;
        let run = |tau: f64| integrate(&c, &PhasePoint::new(vec![0.0, 0.0], vec![tau, 0.0]), 1.0, 1e-12).unwrap();
        let (a, b) = (run(1.0 + h), run(1.0 - h));
        let col: Vec<f64> = a.to_state().iter().zip(b.to_state()).map(|(u, v)| (u - v) / (2.0 * h)).collect();
        for (v, e) in col.iter().zip([1.0, 0.0, 1.0, 0.0]) {
            assert!((v - e).abs() < 1e-7);
        }
    }

    #[test]
    fn error_curve_is_second_order() {
        let f = ProfileSum::single(
            2,
            SeparableProfile { axis: AxisProfile::new(0.1, 0.9, vec![1.0, -1.0]), tube: tube(), linear: Some(1) },
        );
        let curve = epsilon_error_curve(&fermi(), &f, &[0.2, 0.1, 0.05, 0.025], 20).unwrap();
        assert!((curve.slope_x - 2.0).abs() <= 0.15 && (curve.slope_xi - 2.0).abs() <= 0.15, "{curve:?}");
    }

    #[test]
    fn pattern_deviation_is_second_order() {
        let b = build_bumps(0.2, DEFAULT_ORDER).unwrap();
        let eps = [0.2, 0.1, 0.05, 0.025];
        let dev: Vec<f64> = eps.iter().map(|e| endpoint_jacobian(&fermi(), &b, *e).unwrap().pattern_deviation).collect();
        let lx: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
        let ly: Vec<f64> = dev.iter().map(|d| d.ln()).collect();
        let (slope, _) = linear_fit(&lx, &ly);
        assert!((slope - 2.0).abs() <= 0.15, "{slope} {dev:?}");
    }
}
