//! Submanifolds, their conormal bundles, return detection and transversality.

pub(crate) mod returns;
mod submanifold;
mod transversal;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::charts::{MetricChart, PhasePoint};
use crate::error::{LabError, Result};

pub use returns::{find_returns, looping_fraction, returns_csv, LoopingEstimate, ReturnOptions};
pub use submanifold::{CoordinateSlice, PointSet, SigmaSpec, SmallCircle, Submanifold};
pub use transversal::{closed_normal_scan, poincare_rank_defect, transversality_defect, ClosedNormal};

#[derive(Debug, Clone, Serialize)]
pub struct ConormalPoint {
    pub sigma_param: Vec<f64>,
    pub normal_coeffs: Vec<f64>,
    pub phase: PhasePoint,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReturnEvent {
    pub t_return: f64,
    pub start: ConormalPoint,
    pub end: ConormalPoint,
    pub conormal_residual: f64,
    pub transversality_defect: f64,
    pub is_closed: bool,
    /// Set when the refinement could not push the residual below ε_event.
    pub degraded: bool,
}

/// Orthonormal (for the dual metric) basis of the conormal fiber at σ, as columns.
pub fn conormal_frame(sigma: &dyn Submanifold, chart: &MetricChart, sigma_param: &[f64]) -> Result<DMatrix<f64>> {
    let x = sigma.embed(sigma_param);
    let t = sigma.tangent_frame(sigma_param);
    if sigma.dim() > 0 && crate::linalg::rank(&t, 1e-10) < sigma.dim() {
        return Err(LabError::DegenerateFrame(sigma_param.to_vec()));
    }
    let nu = sigma.annihilator(sigma_param);
    let g = chart.ginv(&x);
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for a in 0..nu.ncols() {
        let mut v = nu.column(a).into_owned();
        for c in &cols {
            let k = v.dot(&(&g * c));
            v -= c * k;
        }
        let nn = v.dot(&(&g * &v)).sqrt();
        if nn < 1e-12 {
            return Err(LabError::DegenerateFrame(sigma_param.to_vec()));
        }
        cols.push(v / nn);
    }
    Ok(DMatrix::from_columns(&cols))
}

/// `ξ = Σ c_a ν̂_a` in the annihilator of `T_xΣ`; with `unit`, rescaled to `p = 1`.
pub fn conormal_lift(
    sigma: &dyn Submanifold,
    chart: &MetricChart,
    sigma_param: &[f64],
    normal_coeffs: &[f64],
    unit: bool,
) -> Result<ConormalPoint> {
    if normal_coeffs.len() != sigma.codim() {
        return Err(LabError::Dimension {
            expected: sigma.codim(),
            got: normal_coeffs.len(),
        });
    }
    let norm = normal_coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(LabError::InvalidParams("normal coefficients must be nonzero".into()));
    }
    let frame = conormal_frame(sigma, chart, sigma_param)?;
    let scale = if unit { 1.0 / norm } else { 1.0 };
    let c = DVector::from_iterator(normal_coeffs.len(), normal_coeffs.iter().map(|v| v * scale));
    let xi = &frame * &c;
    let x = sigma.embed(sigma_param);
    if !chart.contains(&x) {
        return Err(LabError::OutOfChart { point: x });
    }
    Ok(ConormalPoint {
        sigma_param: sigma_param.to_vec(),
        normal_coeffs: c.iter().copied().collect(),
        phase: PhasePoint::new(x, xi.iter().copied().collect()),
    })
}

/// Conormal re-fitting of a phase point lying on Σ: nearest parameter, fiber
/// coefficients and the signed tangential residual `⟨ξ, t⟩/(√p |t|_g)`.
pub fn refit(sigma: &dyn Submanifold, chart: &MetricChart, p: &PhasePoint) -> Option<(ConormalPoint, f64)> {
    let (s, _) = sigma.locate(chart, &p.x)?;
    let t = sigma.tangent_frame(&s);
    let gm = chart.metric_tensor(&p.x);
    let xi = DVector::from_column_slice(&p.xi);
    let pn = chart.symbol_unchecked(&p.x, &p.xi).sqrt();
    let mut r = 0.0_f64;
    for c in 0..t.ncols() {
        let tc = t.column(c).into_owned();
        let v = xi.dot(&tc) / (pn * tc.dot(&(&gm * &tc)).sqrt());
        if v.abs() > r.abs() {
            r = v;
        }
    }
    let frame = conormal_frame(sigma, chart, &s).ok()?;
    let g = chart.ginv(&p.x);
    let coeffs = (0..frame.ncols()).map(|a| frame.column(a).dot(&(&g * &xi))).collect();
    Some((
        ConormalPoint {
            sigma_param: s,
            normal_coeffs: coeffs,
            phase: PhasePoint::new(chart.reduce(&p.x), p.xi.clone()),
        },
        r,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams};
    use std::f64::consts::PI;

    #[test]
    fn lift_examples() {
        let flat = make_model(ModelName::FlatTorus, &ModelParams::default()).unwrap().chart;
        let s = CoordinateSlice::torus_horizontal(0.0, 2.0 * PI, 2.0 * PI);
        let c = conormal_lift(&s, &flat, &[1.3], &[1.0], true).unwrap();
        assert_eq!(c.phase.xi, vec![0.0, 1.0]);

        let sphere = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let equator = CoordinateSlice {
            n: 2,
            axis: 1,
            value: 0.0,
            sheet_period: None,
            param_periods: vec![Some(2.0 * PI)],
            bounds: vec![(0.0, 2.0 * PI)],
        };
        let c = conormal_lift(&equator, &sphere, &[0.4], &[-1.0], true).unwrap();
        assert!(c.phase.xi[1] < 0.0 && c.phase.xi[0].abs() < 1e-15);
        assert!((sphere.symbol(&c.phase).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lift_annihilates_tangents_on_curved_charts() {
        let sphere = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let circ = SmallCircle { center: [PI / 2.0, 0.0], radius: 1.1, bounds: (-1.0, 1.0) };
        for th in [-0.8, 0.1, 0.9] {
            let c = conormal_lift(&circ, &sphere, &[th], &[1.0], true).unwrap();
            let t = circ.tangent_frame(&[th]);
            let pair = c.phase.xi[0] * t[(0, 0)] + c.phase.xi[1] * t[(1, 0)];
            assert!(pair.abs() < 1e-12);
            assert!((sphere.symbol(&c.phase).unwrap() - 1.0).abs() < 1e-12);
            let (back, r) = refit(&circ, &sphere, &c.phase).unwrap();
            assert!(r.abs() < 1e-12 && (back.normal_coeffs[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coefficients_rejected() {
        let flat = make_model(ModelName::FlatTorus, &ModelParams::default()).unwrap().chart;
        let s = CoordinateSlice::torus_horizontal(0.0, 2.0 * PI, 2.0 * PI);
        assert!(conormal_lift(&s, &flat, &[1.0], &[0.0], true).is_err());
    }
}
