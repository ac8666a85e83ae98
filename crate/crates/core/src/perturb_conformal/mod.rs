//! Conformal perturbations `(1 + f_s) p` in Fermi charts.

mod cancellation;
mod profiles;
mod response;
mod tail;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::charts::{Conformal, MetricChart, ScalarField};
use crate::error::{LabError, Result};

pub use cancellation::{second_pass_cancellation, CancellationReport, Forcing};
pub use profiles::{
    axis_moments, build_bumps, AxisProfile, BumpTriple, ProfileSum, SeparableProfile, TubeCutoff, ALPHA,
    DEFAULT_ORDER,
};
pub use response::{
    closed_form_axis, closed_form_transverse, endpoint_jacobian, epsilon_error_curve, fd_response, s_block_pattern,
    linear_response, EndpointJacobian, ErrorCurve, ErrorPoint, LinearResponse,
};
pub use tail::{
    break_loop, nearby_returns, perturbed_ambient, target_loop_tail, Attempt, BreakLoopOptions, BreakLoopReport, LoopTail,
    TailMap, TailOptions, TransferredField,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformalParams {
    pub s: Vec<f64>,
    pub epsilon: f64,
    pub bumps: BumpTriple,
}

pub fn f_s_eval(params: &ConformalParams, x: &[f64]) -> Result<f64> {
    Ok(params.bumps.field(x.len(), &params.s)?.value(x))
}

/// Chart with inverse metric `(1 + f) g^{-1}`; refuses unless `1 + f > 0` is
/// guaranteed by the bound `sup |f| < 1`.
pub fn conformal_chart(chart: &MetricChart, f: Arc<dyn ScalarField>, sup_bound: f64) -> Result<MetricChart> {
    if !(sup_bound < 1.0) {
        return Err(LabError::Refused(format!("conformal factor may be nonpositive (sup |f| ≤ {sup_bound})")));
    }
    Ok(MetricChart::new(Conformal { base: chart.clone(), f }))
}

/// The chart of `(1 + f_s)^{-1} g`.
pub fn perturbed_symbol(chart: &MetricChart, params: &ConformalParams) -> Result<MetricChart> {
    let f = params.bumps.field(chart.n(), &params.s)?;
    let bound = f.sup_bound();
    conformal_chart(chart, Arc::new(f), bound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams, PhasePoint};

    #[test]
    fn perturbed_symbol_scales() {
        let c = make_model(ModelName::FermiSegment, &ModelParams::default()).unwrap().chart;
        let bumps = build_bumps(0.2, DEFAULT_ORDER).unwrap();
        let zero = ConformalParams { s: vec![0.0; 3], epsilon: 1.0, bumps: bumps.clone() };
        let c0 = perturbed_symbol(&c, &zero).unwrap();
        let p = PhasePoint::new(vec![0.4, 0.05], vec![0.3, 1.1]);
        assert_eq!(c0.symbol(&p).unwrap(), c.symbol(&p).unwrap());
        let params = ConformalParams { s: vec![0.05, -0.08, 0.1], epsilon: 1.0, bumps };
        let c1 = perturbed_symbol(&c, &params).unwrap();
        let f = f_s_eval(&params, &p.x).unwrap();
        assert!(f != 0.0);
        assert!((c1.symbol(&p).unwrap() - (1.0 + f) * c.symbol(&p).unwrap()).abs() < 1e-12);
        let big = ConformalParams { s: vec![5.0, 0.0, 0.0], ..params };
        assert!(matches!(perturbed_symbol(&c, &big), Err(LabError::Refused(_))));
    }

    #[test]
    fn positive_definite_for_small_s() {
        let c = make_model(ModelName::FermiSegment, &ModelParams::default()).unwrap().chart;
        let bumps = build_bumps(0.2, DEFAULT_ORDER).unwrap();
        for s in [[0.05, 0.05, 0.05], [-0.05, 0.05, -0.05], [0.05, -0.05, -0.05]] {
            let params = ConformalParams { s: s.to_vec(), epsilon: 1.0, bumps: bumps.clone() };
            let c1 = perturbed_symbol(&c, &params).unwrap();
            for i in 0..=20 {
                for j in -4..=4 {
                    let x = [i as f64 / 20.0, j as f64 * 0.05];
                    assert!(c1.ginv(&x).symmetric_eigenvalues().min() > 0.0);
                }
            }
        }
    }
}
