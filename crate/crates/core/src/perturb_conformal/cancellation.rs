//! Second-pass cancellation of a transverse forcing along a closed equator.
//!
//! Model: the normal Jacobi field `J'' + K(t) J = φ(t)` along the geodesic
//! `x₂ = 0`, with the forcing `φ` met once per pass of period `P`. The return
//! to `Σ = {x₁ ≡ 0 mod P}` happens at `t = P` and `t = 2P`.

use serde::{Deserialize, Serialize};

use crate::charts::MetricChart;
use crate::error::{LabError, Result};
use crate::flow::gauss_curvature;
use crate::linalg::gauss_legendre;
use crate::ode::{dopri5, OdeOptions};

/// Bump forcing `amplitude · β((t − t0) / width)` with `β` the standard bump on `(−1, 1)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Forcing {
    pub t0: f64,
    pub width: f64,
    pub amplitude: f64,
}

impl Forcing {
    fn eval(&self, t: f64) -> f64 {
        let q = (t - self.t0) / self.width;
        if q.abs() >= 1.0 {
            0.0
        } else {
            self.amplitude * (-1.0 / (1.0 - q * q)).exp()
        }
    }

    /// `∫ |φ|`.
    pub fn scale(&self) -> f64 {
        let (nodes, weights) = gauss_legendre(128);
        let s: f64 = nodes.iter().zip(&weights).map(|(q, w)| w * (-1.0 / (1.0 - q * q)).exp()).sum();
        self.amplitude.abs() * self.width * s
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CancellationReport {
    pub period: f64,
    pub forcing_scale: f64,
    /// `(J, J')` after the first pass.
    pub first_return: [f64; 2],
    pub second_return: [f64; 2],
    pub first_return_mag: f64,
    pub second_return_mag: f64,
    /// `second_return_mag / first_return_mag`.
    pub ratio: f64,
}

pub fn second_pass_cancellation(chart: &MetricChart, forcing: &Forcing) -> Result<CancellationReport> {
    if chart.n() != 2 {
        return Err(LabError::InvalidParams("cancellation model needs a 2-dimensional chart".into()));
    }
    if !(forcing.width > 0.0) || !forcing.amplitude.is_finite() {
        return Err(LabError::InvalidParams("forcing needs positive width and finite amplitude".into()));
    }
    let period = chart.periods()[0]
        .ok_or_else(|| LabError::InvalidParams("first coordinate must be periodic".into()))?;
    if forcing.t0 - forcing.width <= 0.0 || forcing.t0 + forcing.width >= period {
        return Err(LabError::Refused(format!(
            "forcing support [{}, {}] meets the return section",
            forcing.t0 - forcing.width,
            forcing.t0 + forcing.width
        )));
    }
    let rep = |t: f64| forcing.eval(t.rem_euclid(period));
    let opts = OdeOptions {
        rtol: 1e-12,
        atol: 1e-14,
        h_max: forcing.width / 8.0,
        ..OdeOptions::default()
    };
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let k = gauss_curvature(chart, &[t.rem_euclid(period), 0.0]);
        dy[0] = y[1];
        dy[1] = -k * y[0] + rep(t);
    };
    let first = dopri5(rhs, 0.0, &[0.0, 0.0], period, &opts, false, |_, _| false)?.y;
    let second = dopri5(rhs, period, &first, 2.0 * period, &opts, false, |_, _| false)?.y;
    let mag = |y: &[f64]| y[0].hypot(y[1]);
    let (m1, m2) = (mag(&first), mag(&second));
    Ok(CancellationReport {
        period,
        forcing_scale: forcing.scale(),
        first_return: [first[0], first[1]],
        second_return: [second[0], second[1]],
        first_return_mag: m1,
        second_return_mag: m2,
        ratio: if m1 > 0.0 { m2 / m1 } else { f64::NAN },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams};
    use std::f64::consts::PI;

    // On K ≡ 1 the pass response is the Duhamel integral of sin(P − τ) and cos(P − τ).
    fn duhamel(f: &Forcing, p: f64) -> [f64; 2] {
        let (nodes, weights) = gauss_legendre(128);
        let mut out = [0.0; 2];
        for (q, w) in nodes.iter().zip(&weights) {
            let tau = f.t0 + f.width * q;
            let v = w * f.width * f.eval(tau);
            out[0] += v * (p - tau).sin();
            out[1] += v * (p - tau).cos();
        }
        out
    }

    #[test]
    fn quotient_cancels() {
        let c = make_model(ModelName::HalfTurnQuotient, &ModelParams::default()).unwrap().chart;
        for t0 in [0.7, PI / 2.0, 2.2] {
            let f = Forcing { t0, width: 0.3, amplitude: 0.5 };
            let r = second_pass_cancellation(&c, &f).unwrap();
            let d = duhamel(&f, PI);
            assert!((r.first_return[0] - d[0]).abs() < 1e-9 && (r.first_return[1] - d[1]).abs() < 1e-9);
            assert!(r.first_return_mag >= 0.1 * r.forcing_scale);
            assert!(r.second_return_mag <= 1e-6 * (1.0 + r.forcing_scale), "{r:?}");
        }
    }

    #[test]
    fn full_sphere_accumulates() {
        let c = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let f = Forcing { t0: 1.0, width: 0.3, amplitude: 0.5 };
        let r = second_pass_cancellation(&c, &f).unwrap();
        assert!((r.ratio - 2.0).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn refuses_support_on_section() {
        let c = make_model(ModelName::HalfTurnQuotient, &ModelParams::default()).unwrap().chart;
        let f = Forcing { t0: 0.1, width: 0.3, amplitude: 0.5 };
        assert!(matches!(second_pass_cancellation(&c, &f), Err(LabError::Refused(_))));
    }
}
