use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use super::{find_returns, ReturnEvent, ReturnOptions, Submanifold};
use crate::charts::{MetricChart, PhasePoint};
use crate::error::{LabError, Result};
use crate::flow::integrate_jet;
use crate::linalg::{null_space, orthonormal_columns, rank, singular_values, smallest_singular_value, symplectic_form};

/// Basis (columns) of `T_{(x, η)} Ṅ*Σ`: surface directions `(t_j, Σ c_a ∂_j ν_a)`
/// followed by fiber directions `(0, ν_a)`.
pub(crate) fn conormal_tangent_space(sigma: &dyn Submanifold, sigma_param: &[f64], eta: &[f64]) -> DMatrix<f64> {
    let n = sigma.ambient_dim();
    let k = sigma.dim();
    let nu = sigma.annihilator(sigma_param);
    let c = nu
        .clone()
        .svd(true, true)
        .solve(&DVector::from_column_slice(eta), 1e-14)
        .expect("least squares");
    let t = sigma.tangent_frame(sigma_param);
    let mut v = DMatrix::zeros(2 * n, n);
    let h = 1e-6;
    for j in 0..k {
        let mut sp = sigma_param.to_vec();
        let mut sm = sigma_param.to_vec();
        sp[j] += h;
        sm[j] -= h;
        let dnu = (sigma.annihilator(&sp) - sigma.annihilator(&sm)) / (2.0 * h);
        let deta = dnu * &c;
        for i in 0..n {
            v[(i, j)] = t[(i, j)];
            v[(n + i, j)] = deta[i];
        }
    }
    for a in 0..nu.ncols() {
        for i in 0..n {
            v[(n + i, k + a)] = nu[(i, a)];
        }
    }
    v
}

/// Smallest singular value of `[orth(dΦ·V_start) | orth(V_end)]` for the time-1
/// map at the scaled covector `t_return·ξ`.
pub fn transversality_defect(sigma: &dyn Submanifold, chart: &MetricChart, event: &ReturnEvent) -> Result<f64> {
    let n = chart.n();
    let t = event.t_return;
    let p0 = event.start.phase.scale_xi(t);
    let jet = integrate_jet(chart, &p0, 1.0, crate::flow::DEFAULT_TOL)?;
    let vs = conormal_tangent_space(sigma, &event.start.sigma_param, &p0.xi);
    let ve = conormal_tangent_space(sigma, &event.end.sigma_param, &jet.terminal.xi);
    let img = &jet.jacobian * vs;
    for (name, m) in [("image", &img), ("target", &ve)] {
        if m.ncols() != n || rank(m, 1e-10) != n {
            return Err(LabError::RankDeficient(format!("{name} block of the stacked tangent matrix")));
        }
    }
    let a = orthonormal_columns(&img);
    let b = orthonormal_columns(&ve);
    let mut stacked = DMatrix::zeros(2 * n, 2 * n);
    stacked.view_mut((0, 0), (2 * n, n)).copy_from(&a);
    stacked.view_mut((0, n), (2 * n, n)).copy_from(&b);
    Ok(smallest_singular_value(&stacked))
}

#[derive(Debug, Clone, Serialize)]
pub struct ClosedNormal {
    pub event: ReturnEvent,
    /// Dimension of the generalized 1-eigenspace of the linearized Poincaré map.
    pub rank_defect: usize,
    /// `dim ker(I − dP)`.
    pub geometric_kernel: usize,
}

/// Linearized Poincaré map of the closed orbit through `p0` (unit energy,
/// period `t`) on the section `{ω(·, X) = ω(·, ρ) = 0}`; returns the
/// generalized and geometric multiplicities of the eigenvalue 1.
pub fn poincare_rank_defect(chart: &MetricChart, p0: &PhasePoint, t: f64) -> Result<(usize, usize, DMatrix<f64>)> {
    let n = chart.n();
    let m2 = 2 * n;
    let jet = integrate_jet(chart, p0, t, crate::flow::DEFAULT_TOL)?;
    let mut xh = vec![0.0; m2];
    chart.half_field(&p0.x, &p0.xi, &mut xh);
    let xh = DVector::from_vec(xh);
    let mut rho = DVector::zeros(m2);
    for i in 0..n {
        rho[n + i] = p0.xi[i];
    }
    let om = symplectic_form(n);
    let rows = DMatrix::from_rows(&[(&om * &xh).transpose(), (&om * &rho).transpose()]);
    let b = null_space(&rows, 1e-12 * rows.norm());
    let dp = b.transpose() * &jet.jacobian * &b;
    let m = dp.nrows();
    let k = DMatrix::identity(m, m) - &dp;
    let knorm = singular_values(&k).first().copied().unwrap_or(0.0);
    let geo = singular_values(&k).iter().filter(|s| **s <= 1e-6 * (1.0 + knorm)).count();
    let mut kp = DMatrix::identity(m, m);
    for _ in 0..m {
        kp = &kp * &k;
    }
    let thresh = 1e-6 * (1.0 + knorm).powi(m as i32 - 1);
    let gen = singular_values(&kp).iter().filter(|s| **s <= thresh).count();
    Ok((gen, geo, dp))
}

/// Closed conormal returns up to `t_max` with their degeneracy.
pub fn closed_normal_scan(
    sigma: &dyn Submanifold,
    chart: &MetricChart,
    t_max: f64,
    opts: &ReturnOptions,
) -> Result<Vec<ClosedNormal>> {
    let events = find_returns(sigma, chart, t_max, opts)?;
    events
        .into_iter()
        .filter(|e| e.is_closed)
        .map(|e| {
            let (gen, geo, _) = poincare_rank_defect(chart, &e.start.phase, e.t_return)?;
            Ok(ClosedNormal {
                event: e,
                rank_defect: gen,
                geometric_kernel: geo,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams};
    use crate::conormal::SigmaSpec;
    use std::f64::consts::PI;

    #[test]
    fn flat_torus_closed_normals_are_fully_degenerate() {
        let c = make_model(ModelName::FlatTorus, &ModelParams::default()).unwrap().chart;
        let s = SigmaSpec::TorusLine { value: 0.0, period: 2.0 * PI, sheet_period: 2.0 * PI }.build();
        let opts = ReturnOptions { grid: 6, ..Default::default() };
        let cl = closed_normal_scan(s.as_ref(), &c, 7.0, &opts).unwrap();
        assert_eq!(cl.len(), 2);
        for e in cl {
            assert_eq!(e.rank_defect, 2);
            assert_eq!(e.geometric_kernel, 1);
        }
    }

    #[test]
    fn sphere_closed_normals_rank_two() {
        let c = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let (g, k, _) = poincare_rank_defect(&c, &PhasePoint::new(vec![0.0, 0.0], vec![1.0, 0.0]), 2.0 * PI).unwrap();
        assert_eq!((g, k), (2, 2));
    }

    #[derive(Debug)]
    struct Reversed(std::sync::Arc<dyn Submanifold>);

    impl Submanifold for Reversed {
        fn ambient_dim(&self) -> usize {
            self.0.ambient_dim()
        }
        fn dim(&self) -> usize {
            1
        }
        fn embed(&self, s: &[f64]) -> Vec<f64> {
            self.0.embed(&[-2.0 * s[0]])
        }
        fn tangent_frame(&self, s: &[f64]) -> DMatrix<f64> {
            self.0.tangent_frame(&[-2.0 * s[0]]) * -2.0
        }
        fn param_periods(&self) -> Vec<Option<f64>> {
            vec![None]
        }
        fn grid_bounds(&self) -> Vec<(f64, f64)> {
            vec![(-0.6, 0.6)]
        }
        fn locate(&self, chart: &MetricChart, x: &[f64]) -> Option<(Vec<f64>, f64)> {
            self.0.locate(chart, x).map(|(s, d)| (vec![-0.5 * s[0]], d))
        }
    }

    #[test]
    fn defect_independent_of_parametrization() {
        let c = make_model(ModelName::ConformalBumpTorus, &ModelParams::default()).unwrap().chart;
        let s = SigmaSpec::TorusLine { value: 0.0, period: 2.0 * PI, sheet_period: 2.0 * PI }.build();
        let opts = ReturnOptions { grid: 6, with_defect: false, ..Default::default() };
        let mut e = find_returns(s.as_ref(), &c, 7.0, &opts).unwrap().remove(0);
        let d1 = transversality_defect(s.as_ref(), &c, &e).unwrap();
        let r = Reversed(s.clone());
        e.start.sigma_param = vec![-0.5 * e.start.sigma_param[0]];
        e.end.sigma_param = vec![-0.5 * e.end.sigma_param[0]];
        let d2 = transversality_defect(&r, &c, &e).unwrap();
        assert!((d1 - d2).abs() < 1e-8, "{d1} vs {d2}");
    }
}
