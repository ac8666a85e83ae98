//! The geometer's geodesic flow `exp(t·½H_p)` and its variational flow.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::charts::{MetricChart, PhasePoint};
use crate::error::{LabError, Result};
use crate::ode::{dopri5, DenseOutput, OdeOptions};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_ENERGY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct FlowJet {
    pub terminal: PhasePoint,
    #[serde(serialize_with = "ser_matrix")]
    pub jacobian: DMatrix<f64>,
    pub t: f64,
    pub energy_drift: f64,
}

pub fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(m.nrows()))?;
    for r in 0..m.nrows() {
        let row: Vec<f64> = m.row(r).iter().copied().collect();
        seq.serialize_element(&row)?;
    }
    seq.end()
}

/// Densely interpolated orbit in unwrapped coordinates.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub n: usize,
    pub with_jet: bool,
    pub t_end: f64,
    /// Time at which the orbit left the chart domain, if it did.
    pub exit_time: Option<f64>,
    pub dense: DenseOutput,
}

impl Trajectory {
    /// Raw state (x, ξ[, Φ column-major]) at time `t`.
    pub fn state(&self, t: f64) -> Vec<f64> {
        self.dense.eval(t)
    }

    pub fn phase(&self, t: f64) -> PhasePoint {
        PhasePoint::from_state(&self.state(t)[..2 * self.n])
    }

    pub fn jacobian(&self, t: f64) -> Option<DMatrix<f64>> {
        self.with_jet.then(|| {
            let s = self.state(t);
            let m = 2 * self.n;
            DMatrix::from_column_slice(m, m, &s[m..m + m * m])
        })
    }

    /// Step boundaries of the integrator.
    pub fn sample_times(&self) -> Vec<f64> {
        self.dense.step_times()
    }

    /// CSV with columns `t,x1..xn,xi1..xin` at the step boundaries.
    pub fn to_csv(&self, chart: &MetricChart) -> String {
        let n = self.n;
        let mut out = String::from("t");
        for i in 1..=n {
            write!(out, ",x{i}").unwrap();
        }
        for i in 1..=n {
            write!(out, ",xi{i}").unwrap();
        }
        out.push('\n');
        for t in self.sample_times() {
            let p = self.phase(t);
            let x = chart.reduce(&p.x);
            write!(out, "{t}").unwrap();
            for v in x.iter().chain(&p.xi) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Hamilton's equations for `½H_p`, optionally with the variational matrix.
pub(crate) fn flow_rhs(chart: &MetricChart, with_jet: bool) -> impl Fn(f64, &[f64], &mut [f64]) + '_ {
    let n = chart.n();
    move |_t, y, dy| {
        let x = &y[..n];
        let xi = &y[n..2 * n];
        if !with_jet {
            chart.half_field(x, xi, dy);
            return;
        }
        let a = variational_matrix(chart, x, xi);
        let g = chart.ginv(x);
        let v = DVector::from_column_slice(xi);
        let gv = &g * &v;
        let dg = chart.dginv(x);
        for i in 0..n {
            dy[i] = gv[i];
            dy[n + i] = -0.5 * v.dot(&(&dg[i] * &v));
        }
        let m = 2 * n;
        let phi = DMatrix::from_column_slice(m, m, &y[m..m + m * m]);
        let dphi = a * phi;
        dy[m..m + m * m].copy_from_slice(dphi.as_slice());
    }
}

/// Linearization of `½H_p` at `(x, ξ)`; a Hamiltonian matrix.
pub fn variational_matrix(chart: &MetricChart, x: &[f64], xi: &[f64]) -> DMatrix<f64> {
    let n = chart.n();
    let g = chart.ginv(x);
    let dg = chart.dginv(x);
    let d2 = chart.d2ginv(x);
    let v = DVector::from_column_slice(xi);
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    // bx[(i, l)] = (∂_l G ξ)_i
    let mut bx = DMatrix::zeros(n, n);
    for l in 0..n {
        let c = &dg[l] * &v;
        for i in 0..n {
            bx[(i, l)] = c[i];
        }
    }
    let pxx = DMatrix::from_fn(n, n, |k, l| v.dot(&(&d2[k][l] * &v)));
    a.view_mut((0, 0), (n, n)).copy_from(&bx);
    a.view_mut((0, n), (n, n)).copy_from(&g);
    a.view_mut((n, 0), (n, n)).copy_from(&(pxx * -0.5));
    a.view_mut((n, n), (n, n)).copy_from(&(-bx.transpose()));
    a
}

fn validate(chart: &MetricChart, p0: &PhasePoint, tol: f64) -> Result<()> {
    if !(tol > 0.0) {
        return Err(LabError::InvalidParams(format!("tolerance {tol} must be positive")));
    }
    chart.symbol(p0)?;
    if p0.xi.iter().all(|v| *v == 0.0) {
        return Err(LabError::InvalidParams("covector must be nonzero".into()));
    }
    Ok(())
}

/// Integrate the flow (or flow + variational system) for time `t`, stopping
/// cleanly if the orbit leaves the chart domain.
pub fn trajectory(chart: &MetricChart, p0: &PhasePoint, t: f64, tol: f64, with_jet: bool) -> Result<Trajectory> {
    validate(chart, p0, tol)?;
    let n = chart.n();
    let mut y0 = p0.to_state();
    if with_jet {
        let id = DMatrix::<f64>::identity(2 * n, 2 * n);
        y0.extend_from_slice(id.as_slice());
    }
    let opts = OdeOptions::with_tol(tol);
    let out = dopri5(flow_rhs(chart, with_jet), 0.0, &y0, t, &opts, true, |_, y| !chart.contains(&y[..n]))?;
    Ok(Trajectory {
        n,
        with_jet,
        t_end: out.t,
        exit_time: out.stopped.then_some(out.t),
        dense: out.dense.expect("dense output requested"),
    })
}

fn run(chart: &MetricChart, p0: &PhasePoint, t: f64, tol: f64, with_jet: bool) -> Result<Vec<f64>> {
    validate(chart, p0, tol)?;
    let n = chart.n();
    let mut y0 = p0.to_state();
    if with_jet {
        y0.extend_from_slice(DMatrix::<f64>::identity(2 * n, 2 * n).as_slice());
    }
    let opts = OdeOptions::with_tol(tol);
    let out = dopri5(flow_rhs(chart, with_jet), 0.0, &y0, t, &opts, false, |_, y| !chart.contains(&y[..n]))?;
    if out.stopped {
        return Err(LabError::ChartExit { t: out.t });
    }
    Ok(out.y)
}

/// Terminal phase point, coordinates reduced modulo periods.
pub fn integrate(chart: &MetricChart, p0: &PhasePoint, t: f64, tol: f64) -> Result<PhasePoint> {
    let y = run(chart, p0, t, tol, false)?;
    let mut p = PhasePoint::from_state(&y);
    p.x = chart.reduce(&p.x);
    Ok(p)
}

/// Like [`integrate`] but without reducing coordinates.
pub fn integrate_unwrapped(chart: &MetricChart, p0: &PhasePoint, t: f64, tol: f64) -> Result<PhasePoint> {
    Ok(PhasePoint::from_state(&run(chart, p0, t, tol, false)?))
}

pub fn integrate_jet(chart: &MetricChart, p0: &PhasePoint, t: f64, tol: f64) -> Result<FlowJet> {
    let n = chart.n();
    let m = 2 * n;
    let y = run(chart, p0, t, tol, true)?;
    let mut terminal = PhasePoint::from_state(&y[..m]);
    let e0 = chart.symbol_unchecked(&p0.x, &p0.xi);
    let e1 = chart.symbol_unchecked(&terminal.x, &terminal.xi);
    terminal.x = chart.reduce(&terminal.x);
    Ok(FlowJet {
        terminal,
        jacobian: DMatrix::from_column_slice(m, m, &y[m..m + m * m]),
        t,
        energy_drift: (e1 - e0).abs(),
    })
}

impl FlowJet {
    /// CSV of the Jacobian in `[[xx, xξ], [ξx, ξξ]]` block order, one row per line.
    pub fn jacobian_csv(&self) -> String {
        let m = self.jacobian.nrows();
        let mut out = String::new();
        for r in 0..m {
            let row: Vec<String> = (0..m).map(|c| self.jacobian[(r, c)].to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// `max |Φ^t(x, cξ) − (X(ct), c·Ξ(ct))|`.
pub fn homogeneity_check(chart: &MetricChart, p0: &PhasePoint, c: f64, t: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(LabError::InvalidParams(format!("scale {c} must be positive")));
    }
    let lhs = integrate_unwrapped(chart, &p0.scale_xi(c), t, DEFAULT_TOL)?;
    let rhs = integrate_unwrapped(chart, p0, c * t, DEFAULT_TOL)?.scale_xi(c);
    Ok(chart.phase_distance(&lhs, &rhs))
}

/// Gauss curvature of a 2-dimensional chart from differences of the
/// Christoffel symbols.
pub fn gauss_curvature(chart: &MetricChart, x: &[f64]) -> f64 {
    let h = 1e-5;
    let gam = chart.christoffel(x);
    let dgam: Vec<Vec<DMatrix<f64>>> = (0..2)
        .map(|j| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[j] += h;
            m[j] -= h;
            let gp = chart.christoffel(&p);
            let gm = chart.christoffel(&m);
            (0..2).map(|l| (&gp[l] - &gm[l]) / (2.0 * h)).collect()
        })
        .collect();
    // R^l_{kij} = ∂_i Γ^l_{jk} − ∂_j Γ^l_{ik} + Γ^l_{im} Γ^m_{jk} − Γ^l_{jm} Γ^m_{ik}
    let riem = |l: usize, k: usize, i: usize, j: usize| -> f64 {
        let mut r = dgam[i][l][(j, k)] - dgam[j][l][(i, k)];
        for m in 0..2 {
            r += gam[l][(i, m)] * gam[m][(j, k)] - gam[l][(j, m)] * gam[m][(i, k)];
        }
        r
    };
    let g = chart.metric_tensor(x);
    // R_{1212} = g_{1l} R^l_{2 1 2}
    let r1212: f64 = (0..2).map(|l| g[(0, l)] * riem(l, 1, 0, 1)).sum();
    r1212 / g.determinant()
}

/// Max residual of the scalar Jacobi equation `j'' + K j = 0` for the normal
/// component of the variational field started at `δx = 0`, `δξ ⟂ ξ`.
pub fn jacobi_residual(chart: &MetricChart, p0: &PhasePoint, t: f64) -> Result<f64> {
    if chart.n() != 2 {
        return Err(LabError::Unsupported("jacobi_residual requires a 2-dimensional chart".into()));
    }
    let traj = trajectory(chart, p0, t, DEFAULT_TOL, true)?;
    if let Some(te) = traj.exit_time {
        return Err(LabError::ChartExit { t: te });
    }
    // Initial covector variation g-orthogonal to ξ, unit in the dual norm.
    let g0 = chart.ginv(&p0.x);
    let xi = DVector::from_column_slice(&p0.xi);
    let mut eta = DVector::from_column_slice(&[-p0.xi[1], p0.xi[0]]);
    eta -= &xi * (xi.dot(&(&g0 * &eta)) / xi.dot(&(&g0 * &xi)));
    eta /= eta.dot(&(&g0 * &eta)).sqrt();
    let j_at = |s: f64| -> (f64, Vec<f64>) {
        let st = traj.state(s);
        let x = &st[..2];
        let phi = DMatrix::from_column_slice(4, 4, &st[4..20]);
        let col = phi.view((0, 2), (4, 2)) * &eta;
        let gi = chart.ginv(x);
        let v = &gi * DVector::from_column_slice(&st[2..4]);
        let gm = chart.metric_tensor(x);
        // unit normal: g-orthogonal complement of the velocity
        let mut nrm = DVector::from_column_slice(&[-v[1], v[0]]);
        nrm -= &v * (v.dot(&(&gm * &nrm)) / v.dot(&(&gm * &v)));
        nrm /= nrm.dot(&(&gm * &nrm)).sqrt();
        let dx = DVector::from_column_slice(&[col[0], col[1]]);
        (dx.dot(&(&gm * &nrm)), x.to_vec())
    };
    let h = 0.02;
    let mut worst: f64 = 0.0;
    let steps = ((t - 4.0 * h) / 0.05).floor().max(1.0) as usize;
    for k in 0..=steps {
        let s = 2.0 * h + (t - 4.0 * h) * k as f64 / steps as f64;
        let (j0, x) = j_at(s);
        let jm2 = j_at(s - 2.0 * h).0;
        let jm1 = j_at(s - h).0;
        let jp1 = j_at(s + h).0;
        let jp2 = j_at(s + 2.0 * h).0;
        let jdd = (-jp2 + 16.0 * jp1 - 30.0 * j0 + 16.0 * jm1 - jm2) / (12.0 * h * h);
        worst = worst.max((jdd + gauss_curvature(chart, &x) * j0).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams};
    use crate::linalg::symplecticity_defect;
    use std::f64::consts::PI;

    fn model(name: ModelName) -> MetricChart {
        make_model(name, &ModelParams::default()).unwrap().chart
    }

    #[test]
    fn flat_torus_vertical_line_closes() {
        let c = model(ModelName::FlatTorus);
        let p = integrate(&c, &PhasePoint::new(vec![0.0, 0.0], vec![0.0, 1.0]), 2.0 * PI, DEFAULT_TOL).unwrap();
        assert!(c.delta(&p.x, &[0.0, 0.0]).iter().all(|d| d.abs() < 1e-9));
        assert!((p.xi[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_meridian_half_turn() {
        let c = model(ModelName::RoundSphere);
        // A polar meridian would enter the caps; a great circle through the equator
        // at inclination stays below latitude 1.2 and reaches the antipode at t = π.
        let incl: f64 = 1.0;
        let xi = vec![incl.cos(), incl.sin()];
        let p = integrate(&c, &PhasePoint::new(vec![0.0, 0.0], xi.clone()), PI, DEFAULT_TOL).unwrap();
        assert!((p.x[0] - PI).abs() < 1e-8);
        assert!(p.x[1].abs() < 1e-8);
        assert!((p.xi[0] - xi[0]).abs() < 1e-8 && (p.xi[1] + xi[1]).abs() < 1e-8);
    }

    #[test]
    fn polar_cap_entry_is_chart_exit() {
        let c = model(ModelName::RoundSphere);
        let r = integrate(&c, &PhasePoint::new(vec![0.0, 0.0], vec![0.0, 1.0]), 3.0, DEFAULT_TOL);
        assert!(matches!(r, Err(LabError::ChartExit { .. })));
    }

    #[test]
    fn flat_jacobian_is_unit_shear() {
        let c = model(ModelName::FlatTorus);
        let j = integrate_jet(&c, &PhasePoint::new(vec![0.3, 0.1], vec![0.6, 0.8]), 1.7, DEFAULT_TOL).unwrap();
        let mut want = DMatrix::identity(4, 4);
        want[(0, 2)] = 1.7;
        want[(1, 3)] = 1.7;
        assert!((j.jacobian - want).abs().max() < 1e-10);
        let j0 = integrate_jet(&c, &PhasePoint::new(vec![0.3, 0.1], vec![0.6, 0.8]), 0.0, DEFAULT_TOL).unwrap();
        assert_eq!(j0.jacobian, DMatrix::identity(4, 4));
    }

    #[test]
    fn reversibility_and_composition() {
        let c = model(ModelName::ConformalBumpTorus);
        let p0 = PhasePoint::new(vec![2.5, 2.9], vec![0.8, 0.6]);
        let p1 = integrate_unwrapped(&c, &p0, 4.0, DEFAULT_TOL).unwrap();
        let back = integrate_unwrapped(&c, &p1, -4.0, DEFAULT_TOL).unwrap();
        assert!(c.phase_distance(&back, &p0) < 1e-8);
        let ja = integrate_jet(&c, &p0, 1.5, DEFAULT_TOL).unwrap();
        let mid = integrate_unwrapped(&c, &p0, 1.5, DEFAULT_TOL).unwrap();
        let jb = integrate_jet(&c, &mid, 2.0, DEFAULT_TOL).unwrap();
        let jab = integrate_jet(&c, &p0, 3.5, DEFAULT_TOL).unwrap();
        assert!((&jb.jacobian * &ja.jacobian - &jab.jacobian).abs().max() < 1e-5);
        assert!(symplecticity_defect(&jab.jacobian) < 1e-6);
        assert!(jab.energy_drift < 1e-9);
    }

    #[test]
    fn homogeneity_examples() {
        let flat = model(ModelName::FlatTorus);
        let p = PhasePoint::new(vec![0.0, 0.0], vec![0.6, 0.8]);
        assert_eq!(homogeneity_check(&flat, &p, 1.0, 3.0).unwrap(), 0.0);
        assert!(homogeneity_check(&flat, &p, 2.0, 1.0).unwrap() < 1e-12);
        let s = model(ModelName::RoundSphere);
        let p = PhasePoint::new(vec![0.0, 0.2], vec![0.9, 0.3]);
        assert!(homogeneity_check(&s, &p, 0.5, 4.0).unwrap() < 1e-7);
    }

    #[test]
    fn curvature_of_models() {
        assert!(gauss_curvature(&model(ModelName::FlatTorus), &[1.0, 1.0]).abs() < 1e-12);
        assert!((gauss_curvature(&model(ModelName::RoundSphere), &[1.0, 0.4]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn jacobi_equation_residuals() {
        let flat = model(ModelName::FlatTorus);
        let p = PhasePoint::new(vec![0.0, 0.0], vec![0.6, 0.8]);
        assert!(jacobi_residual(&flat, &p, 6.0).unwrap() < 1e-10);
        let s = model(ModelName::RoundSphere);
        let p = PhasePoint::new(vec![0.0, 0.0], vec![0.8, 0.6]);
        assert!(jacobi_residual(&s, &p, 6.0).unwrap() < 1e-4);
    }

    #[test]
    fn sphere_equatorial_monodromy_has_unit_spatial_block() {
        let s = model(ModelName::RoundSphere);
        let j = integrate_jet(&s, &PhasePoint::new(vec![0.0, 0.0], vec![1.0, 0.0]), 2.0 * PI, DEFAULT_TOL).unwrap();
        // transverse (x₂, ξ₂) block returns to the identity
        let blk = DMatrix::from_row_slice(2, 2, &[j.jacobian[(1, 1)], j.jacobian[(1, 3)], j.jacobian[(3, 1)], j.jacobian[(3, 3)]]);
        assert!((blk - DMatrix::identity(2, 2)).abs().max() < 1e-7);
    }
}
