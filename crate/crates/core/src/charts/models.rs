use std::f64::consts::PI;
use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{wrap_delta, InverseMetric, MetricChart};
use crate::error::{LabError, Result};

/// Euclidean metric, optionally periodic in each coordinate.
#[derive(Debug, Clone)]
pub struct Flat {
    pub periods: Vec<Option<f64>>,
}

impl Flat {
    pub fn torus(periods: &[f64]) -> Self {
        Self {
            periods: periods.iter().map(|&p| Some(p)).collect(),
        }
    }
}

impl InverseMetric for Flat {
    fn dim(&self) -> usize {
        self.periods.len()
    }
    fn periods(&self) -> Vec<Option<f64>> {
        self.periods.clone()
    }
    fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite())
    }
    fn ginv(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim())
    }
    fn dginv(&self, _x: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.dim();
        vec![DMatrix::zeros(n, n); n]
    }
    fn d2ginv(&self, _x: &[f64]) -> Vec<Vec<DMatrix<f64>>> {
        let n = self.dim();
        vec![vec![DMatrix::zeros(n, n); n]; n]
    }
}

/// Round-sphere family `cos²(κ x₂) dx₁² + dx₂²` in (longitude, latitude)
/// type coordinates. κ = 1 is the unit sphere; other κ give the normalized
/// equatorial Fermi chart of a segment.
#[derive(Debug, Clone)]
pub struct Sphere {
    pub kappa: f64,
    pub lon_period: f64,
    /// Domain is `|x₂| ≤ lat_limit` (excludes the polar caps or bounds the tube).
    pub lat_limit: f64,
}

impl Sphere {
    pub fn round(delta_pole: f64) -> Self {
        Self {
            kappa: 1.0,
            lon_period: 2.0 * PI,
            lat_limit: PI / 2.0 - delta_pole,
        }
    }

    pub fn half_turn_quotient(delta_pole: f64) -> Self {
        Self {
            lon_period: PI,
            ..Self::round(delta_pole)
        }
    }
}

impl InverseMetric for Sphere {
    fn dim(&self) -> usize {
        2
    }
    fn periods(&self) -> Vec<Option<f64>> {
        vec![Some(self.lon_period), None]
    }
    fn contains(&self, x: &[f64]) -> bool {
        x[0].is_finite() && x[1].abs() <= self.lat_limit
    }
    fn ginv(&self, x: &[f64]) -> DMatrix<f64> {
        let c = (self.kappa * x[1]).cos();
        DMatrix::from_row_slice(2, 2, &[1.0 / (c * c), 0.0, 0.0, 1.0])
    }
    fn dginv(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let k = self.kappa;
        let (s, c) = (k * x[1]).sin_cos();
        let d = 2.0 * k * s / (c * c * c);
        vec![
            DMatrix::zeros(2, 2),
            DMatrix::from_row_slice(2, 2, &[d, 0.0, 0.0, 0.0]),
        ]
    }
    fn d2ginv(&self, x: &[f64]) -> Vec<Vec<DMatrix<f64>>> {
        let k = self.kappa;
        let (s, c) = (k * x[1]).sin_cos();
        let sec2 = 1.0 / (c * c);
        let tan = s / c;
        let dd = k * k * (4.0 * sec2 * tan * tan + 2.0 * sec2 * sec2);
        let z = DMatrix::zeros(2, 2);
        vec![
            vec![z.clone(), z.clone()],
            vec![z, DMatrix::from_row_slice(2, 2, &[dd, 0.0, 0.0, 0.0])],
        ]
    }
}

/// Smooth scalar field with analytic gradient and Hessian.
pub trait ScalarField: Send + Sync + Debug {
    fn value(&self, x: &[f64]) -> f64;
    fn grad(&self, x: &[f64]) -> Vec<f64>;
    fn hess(&self, x: &[f64]) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub n: usize,
}

impl ScalarField for ZeroField {
    fn value(&self, _x: &[f64]) -> f64 {
        0.0
    }
    fn grad(&self, _x: &[f64]) -> Vec<f64> {
        vec![0.0; self.n]
    }
    fn hess(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.n, self.n)
    }
}

/// `A·exp(1 − 1/(1 − ρ))` with `ρ = |x − c|²/r²`, zero for `ρ ≥ 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadialBump {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
    #[serde(default)]
    pub periods: Vec<Option<f64>>,
}

impl RadialBump {
    fn offset(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.center)
            .enumerate()
            .map(|(i, (a, c))| match self.periods.get(i).copied().flatten() {
                Some(p) => wrap_delta(a - c, p),
                None => a - c,
            })
            .collect()
    }

    /// `(ψ, ψ', ψ'')` as functions of ρ, and the offset.
    fn profile(&self, x: &[f64]) -> Option<(f64, f64, f64, Vec<f64>)> {
        let d = self.offset(x);
        let r2 = self.radius * self.radius;
        let rho = d.iter().map(|v| v * v).sum::<f64>() / r2;
        if rho >= 1.0 {
            return None;
        }
        let q = 1.0 / (1.0 - rho);
        let psi = self.amplitude * (1.0 - q).exp();
        Some((psi, -psi * q * q, psi * (q.powi(4) - 2.0 * q.powi(3)), d))
    }
}

impl ScalarField for RadialBump {
    fn value(&self, x: &[f64]) -> f64 {
        self.profile(x).map(|p| p.0).unwrap_or(0.0)
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let r2 = self.radius * self.radius;
        match self.profile(x) {
            Some((_, d1, _, d)) => d.iter().map(|v| d1 * 2.0 * v / r2).collect(),
            None => vec![0.0; x.len()],
        }
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        let r2 = self.radius * self.radius;
        match self.profile(x) {
            Some((_, d1, d2, d)) => {
                let gr = DVector::from_iterator(n, d.iter().map(|v| 2.0 * v / r2));
                &gr * gr.transpose() * d2 + DMatrix::identity(n, n) * (2.0 * d1 / r2)
            }
            None => DMatrix::zeros(n, n),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BumpSum(pub Vec<RadialBump>);

impl ScalarField for BumpSum {
    fn value(&self, x: &[f64]) -> f64 {
        self.0.iter().map(|b| b.value(x)).sum()
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for b in &self.0 {
            for (gi, v) in g.iter_mut().zip(b.grad(x)) {
                *gi += v;
            }
        }
        g
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        let n = x.len();
        self.0.iter().fold(DMatrix::zeros(n, n), |acc, b| acc + b.hess(x))
    }
}

/// Conformal change `g^{ij} ↦ (1 + f) g^{ij}`, i.e. `g ↦ (1 + f)⁻¹ g`.
#[derive(Debug, Clone)]
pub struct Conformal {
    pub base: MetricChart,
    pub f: Arc<dyn ScalarField>,
}

impl InverseMetric for Conformal {
    fn dim(&self) -> usize {
        self.base.n()
    }
    fn periods(&self) -> Vec<Option<f64>> {
        self.base.periods()
    }
    fn contains(&self, x: &[f64]) -> bool {
        self.base.contains(x) && 1.0 + self.f.value(x) > 0.0
    }
    fn ginv(&self, x: &[f64]) -> DMatrix<f64> {
        self.base.ginv(x) * (1.0 + self.f.value(x))
    }
    fn dginv(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let g = self.base.ginv(x);
        let w = 1.0 + self.f.value(x);
        let gr = self.f.grad(x);
        self.base
            .dginv(x)
            .into_iter()
            .zip(gr)
            .map(|(d, fk)| &g * fk + d * w)
            .collect()
    }
    fn d2ginv(&self, x: &[f64]) -> Vec<Vec<DMatrix<f64>>> {
        let n = self.dim();
        let g = self.base.ginv(x);
        let dg = self.base.dginv(x);
        let d2g = self.base.d2ginv(x);
        let w = 1.0 + self.f.value(x);
        let gr = self.f.grad(x);
        let h = self.f.hess(x);
        (0..n)
            .map(|k| {
                (0..n)
                    .map(|l| &g * h[(k, l)] + &dg[l] * gr[k] + &dg[k] * gr[l] + &d2g[k][l] * w)
                    .collect()
            })
            .collect()
    }
}

/// `g(ε; x) = g(ε(x − a) + a)`.
#[derive(Debug, Clone)]
pub struct Scaled {
    pub base: MetricChart,
    pub epsilon: f64,
    pub anchor: Vec<f64>,
}

impl Scaled {
    fn map(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.anchor)
            .map(|(v, a)| self.epsilon * (v - a) + a)
            .collect()
    }
}

impl InverseMetric for Scaled {
    fn dim(&self) -> usize {
        self.base.n()
    }
    fn periods(&self) -> Vec<Option<f64>> {
        vec![None; self.dim()]
    }
    fn contains(&self, x: &[f64]) -> bool {
        self.base.contains(&self.map(x))
    }
    fn ginv(&self, x: &[f64]) -> DMatrix<f64> {
        self.base.ginv(&self.map(x))
    }
    fn dginv(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        self.base
            .dginv(&self.map(x))
            .into_iter()
            .map(|d| d * self.epsilon)
            .collect()
    }
    fn d2ginv(&self, x: &[f64]) -> Vec<Vec<DMatrix<f64>>> {
        let e2 = self.epsilon * self.epsilon;
        self.base
            .d2ginv(&self.map(x))
            .into_iter()
            .map(|row| row.into_iter().map(|d| d * e2).collect())
            .collect()
    }
}

/// Scaled chart about the axis point `e₁`.
pub fn scale_chart(chart: &MetricChart, epsilon: f64) -> Result<MetricChart> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(LabError::InvalidParams(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let mut anchor = vec![0.0; chart.n()];
    anchor[0] = 1.0;
    Ok(MetricChart::new(Scaled {
        base: chart.clone(),
        epsilon,
        anchor,
    }))
}

/// A diffeomorphism given pointwise with its Jacobian.
pub trait DiffeoMap: Send + Sync + Debug {
    fn apply(&self, x: &[f64]) -> (Vec<f64>, DMatrix<f64>);
}

/// Pullback `κ*g`: `g'^{-1}(x) = dκ⁻¹ g^{-1}(κ x) dκ^{-T}`.
#[derive(Debug, Clone)]
pub struct Pullback {
    pub base: MetricChart,
    pub kappa: Arc<dyn DiffeoMap>,
}

impl InverseMetric for Pullback {
    fn dim(&self) -> usize {
        self.base.n()
    }
    fn periods(&self) -> Vec<Option<f64>> {
        self.base.periods()
    }
    fn contains(&self, x: &[f64]) -> bool {
        self.base.contains(x)
    }
    fn ginv(&self, x: &[f64]) -> DMatrix<f64> {
        let (y, j) = self.kappa.apply(x);
        let ji = j.try_inverse().expect("diffeomorphism Jacobian is invertible");
        let m = &ji * self.base.ginv(&y) * ji.transpose();
        (&m + m.transpose()) * 0.5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelName {
    FlatTorus,
    RoundSphere,
    HalfTurnQuotient,
    ConformalBumpTorus,
    FermiSegment,
}

impl ModelName {
    pub const ALL: [ModelName; 5] = [
        ModelName::FlatTorus,
        ModelName::RoundSphere,
        ModelName::HalfTurnQuotient,
        ModelName::ConformalBumpTorus,
        ModelName::FermiSegment,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelName::FlatTorus => "flat_torus",
            ModelName::RoundSphere => "round_sphere",
            ModelName::HalfTurnQuotient => "half_turn_quotient",
            ModelName::ConformalBumpTorus => "conformal_bump_torus",
            ModelName::FermiSegment => "fermi_segment",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub center: Vec<f64>,
    pub radius: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub periods: Vec<f64>,
    pub delta_pole: f64,
    pub bumps: Vec<BumpSpec>,
    /// Sphere radius for the equatorial segment chart.
    pub radius: f64,
    pub segment_length: f64,
    pub r_tube: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            periods: vec![2.0 * PI, 2.0 * PI],
            delta_pole: 0.1,
            bumps: vec![BumpSpec {
                center: vec![PI, PI],
                radius: 1.0,
                amplitude: 0.2,
            }],
            radius: 1.0,
            segment_length: 1.0,
            r_tube: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ManifoldModel {
    pub name: ModelName,
    pub chart: MetricChart,
    pub params: ModelParams,
}

pub fn make_model(name: ModelName, params: &ModelParams) -> Result<ManifoldModel> {
    let bad = |m: String| Err(LabError::InvalidParams(m));
    let sphere_family = matches!(name, ModelName::RoundSphere | ModelName::HalfTurnQuotient);
    if sphere_family && !(params.delta_pole > 0.0 && params.delta_pole < PI / 2.0) {
        return bad(format!("delta_pole {} outside (0, π/2)", params.delta_pole));
    }
    let torus_periods = || -> Result<Vec<f64>> {
        if params.periods.len() < 2 || params.periods.iter().any(|p| !(*p > 0.0)) {
            return Err(LabError::InvalidParams("torus periods must be positive, n ≥ 2".into()));
        }
        Ok(params.periods.clone())
    };
    let chart = match name {
        ModelName::FlatTorus => MetricChart::new(Flat::torus(&torus_periods()?)),
        ModelName::RoundSphere => MetricChart::new(Sphere::round(params.delta_pole)),
        ModelName::HalfTurnQuotient => MetricChart::new(Sphere::half_turn_quotient(params.delta_pole)),
        ModelName::ConformalBumpTorus => {
            let periods = torus_periods()?;
            let half = periods.iter().cloned().fold(f64::INFINITY, f64::min) / 2.0;
            let mut neg = 0.0;
            let mut bumps = Vec::new();
            for b in &params.bumps {
                if b.center.len() != periods.len() {
                    return bad("bump center dimension mismatch".into());
                }
                if !(b.radius > 0.0 && b.radius < half) {
                    return bad(format!("bump radius {} exceeds the chart (half period {half})", b.radius));
                }
                neg += b.amplitude.min(0.0);
                bumps.push(RadialBump {
                    center: b.center.clone(),
                    radius: b.radius,
                    amplitude: b.amplitude,
                    periods: periods.iter().map(|&p| Some(p)).collect(),
                });
            }
            if neg <= -1.0 {
                return bad("bump amplitudes allow a nonpositive conformal factor".into());
            }
            MetricChart::new(Conformal {
                base: MetricChart::new(Flat::torus(&periods)),
                f: Arc::new(BumpSum(bumps)),
            })
        }
        ModelName::FermiSegment => {
            if !(params.radius > 0.0 && params.segment_length > 0.0) {
                return bad("radius and segment_length must be positive".into());
            }
            let kappa = params.segment_length / params.radius;
            if !(params.r_tube > 0.0 && kappa * params.r_tube < PI / 2.0) {
                return bad(format!("r_tube {} invalid", params.r_tube));
            }
            MetricChart::new(Sphere {
                kappa,
                lon_period: 2.0 * PI / kappa,
                lat_limit: params.r_tube,
            })
        }
    };
    Ok(ManifoldModel {
        name,
        chart,
        params: params.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::PhasePoint;

    fn sample_points(n: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
        // Halton-like deterministic sequence.
        (1..=n)
            .map(|k| {
                let a = (k as f64 * 0.754_877_666_2).fract();
                let b = (k as f64 * 0.569_840_290_9).fract();
                vec![lo + (hi - lo) * a, lo + (hi - lo) * b]
            })
            .collect()
    }

    #[test]
    fn symbol_examples() {
        let flat = make_model(ModelName::FlatTorus, &ModelParams::default()).unwrap().chart;
        assert_eq!(flat.symbol(&PhasePoint::new(vec![0.0, 0.0], vec![0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(flat.symbol(&PhasePoint::new(vec![1.0, 2.0], vec![3.0, 4.0])).unwrap(), 25.0);
        let s = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let u: f64 = 0.7;
        let p = s.symbol(&PhasePoint::new(vec![0.3, u], vec![2.0, 0.0])).unwrap();
        assert!((p - 4.0 / (u.cos() * u.cos())).abs() < 1e-14);
    }

    #[test]
    fn polar_cap_is_out_of_chart() {
        let s = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let e = s.symbol(&PhasePoint::new(vec![0.0, 1.5], vec![1.0, 0.0]));
        assert!(matches!(e, Err(LabError::OutOfChart { .. })));
    }

    #[test]
    fn hamilton_field_flat_and_zero_covector() {
        let flat = make_model(ModelName::FlatTorus, &ModelParams::default()).unwrap().chart;
        let h = flat.hamilton_field(&PhasePoint::new(vec![0.1, 0.2], vec![0.5, -1.0])).unwrap();
        assert_eq!(h, vec![1.0, -2.0, 0.0, 0.0]);
        let bump = make_model(ModelName::ConformalBumpTorus, &ModelParams::default()).unwrap().chart;
        let h = bump.hamilton_field(&PhasePoint::new(vec![3.0, 3.3], vec![0.0, 0.0])).unwrap();
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zoo_invariants_hold_on_samples() {
        for name in ModelName::ALL {
            let m = make_model(name, &ModelParams::default()).unwrap();
            let pts = sample_points(300, -1.2, 6.0)
                .into_iter()
                .map(|mut p| {
                    if name != ModelName::FlatTorus && name != ModelName::ConformalBumpTorus {
                        p[1] = (p[1] / 6.0 - 0.5) * 0.5;
                    }
                    p
                })
                .collect::<Vec<_>>();
            let d = m.chart.check_invariants(&pts);
            assert!(d.samples > 100, "{name:?}");
            assert!(d.max_asymmetry <= 1e-12);
            assert!(d.min_eigenvalue > 0.0);
            assert!(d.max_dginv_error <= 1e-6, "{name:?}: {}", d.max_dginv_error);
        }
    }

    #[test]
    fn analytic_second_derivatives_match_differences() {
        let m = make_model(ModelName::ConformalBumpTorus, &ModelParams::default()).unwrap();
        let x = [3.4, 2.7];
        let an = m.chart.d2ginv(&x);
        let fd = super::super::fd_hessian_from_gradient(|y| m.chart.dginv(y), &x, 1e-4);
        for k in 0..2 {
            for l in 0..2 {
                assert!((&an[k][l] - &fd[k][l]).abs().max() < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_bump_is_rejected() {
        let mut p = ModelParams::default();
        p.bumps[0].radius = 4.0;
        assert!(make_model(ModelName::ConformalBumpTorus, &p).is_err());
        p.bumps[0].radius = 1.0;
        p.bumps[0].amplitude = -1.5;
        assert!(make_model(ModelName::ConformalBumpTorus, &p).is_err());
    }

    #[test]
    fn quotient_has_half_period() {
        let q = make_model(ModelName::HalfTurnQuotient, &ModelParams::default()).unwrap().chart;
        assert_eq!(q.periods()[0], Some(PI));
        let s = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        assert_eq!(s.periods()[0], Some(2.0 * PI));
        assert_eq!(q.ginv(&[0.4, 0.2]), s.ginv(&[0.4, 0.2]));
    }

    #[test]
    fn scale_chart_limits() {
        let m = make_model(ModelName::FermiSegment, &ModelParams::default()).unwrap();
        let z = scale_chart(&m.chart, 0.0).unwrap();
        assert_eq!(z.ginv(&[0.3, 0.2]), DMatrix::identity(2, 2));
        let one = scale_chart(&m.chart, 1.0).unwrap();
        assert_eq!(one.ginv(&[0.3, 0.2]), m.chart.ginv(&[0.3, 0.2]));
        assert!(scale_chart(&m.chart, 1.5).is_err());
    }
}
