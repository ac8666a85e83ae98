//! Dormand–Prince 5(4) integrator with continuous (dense) output.

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Largest allowed step magnitude.
    pub h_max: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-10,
            h_max: 0.5,
            h_min: 1e-14,
            max_steps: 2_000_000,
        }
    }
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step's interpolation data.
#[derive(Debug, Clone)]
struct Segment {
    t0: f64,
    h: f64,
    /// Five coefficient vectors, flattened.
    rc: Vec<f64>,
}

/// Continuous extension over all accepted steps of one integration.
#[derive(Debug, Clone)]
pub struct DenseOutput {
    dim: usize,
    segments: Vec<Segment>,
}

impl DenseOutput {
    pub fn t_start(&self) -> f64 {
        self.segments.first().map(|s| s.t0).unwrap_or(0.0)
    }

    pub fn t_end(&self) -> f64 {
        self.segments.last().map(|s| s.t0 + s.h).unwrap_or(0.0)
    }

    /// Step boundaries, in integration order.
    pub fn step_times(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.segments.iter().map(|s| s.t0).collect();
        v.push(self.t_end());
        v
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let forward = self.t_end() >= self.t_start();
        // Segments are ordered in the integration direction.
        let idx = self
            .segments
            .partition_point(|s| if forward { s.t0 + s.h < t } else { s.t0 + s.h > t })
            .min(self.segments.len() - 1);
        let s = &self.segments[idx];
        let theta = (t - s.t0) / s.h;
        let th1 = 1.0 - theta;
        let d = self.dim;
        (0..d)
            .map(|i| {
                let r = |k: usize| s.rc[k * d + i];
                r(0) + theta * (r(1) + th1 * (r(2) + theta * (r(3) + th1 * r(4))))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct OdeOutcome {
    pub t: f64,
    pub y: Vec<f64>,
    pub dense: Option<DenseOutput>,
    /// Set when the stop predicate fired before reaching the requested end time.
    pub stopped: bool,
    pub steps: usize,
}

/// Integrate `y' = f(t, y)` from `t0` to `t1` (either direction).
///
/// `stop` is checked after every accepted step; when it returns true the
/// integration ends at the last accepted state with `stopped = true`.
pub fn dopri5<F, S>(
    f: F,
    t0: f64,
    y0: &[f64],
    t1: f64,
    opts: &OdeOptions,
    keep_dense: bool,
    mut stop: S,
) -> Result<OdeOutcome>
where
    F: Fn(f64, &[f64], &mut [f64]),
    S: FnMut(f64, &[f64]) -> bool,
{
    let n = y0.len();
    let dir = if t1 >= t0 { 1.0 } else { -1.0 };
    let span = (t1 - t0).abs();
    let mut t = t0;
    let mut y = y0.to_vec();
    let mut segments = Vec::new();
    if span == 0.0 {
        return Ok(OdeOutcome {
            t,
            y,
            dense: keep_dense.then_some(DenseOutput { dim: n, segments }),
            stopped: false,
            steps: 0,
        });
    }

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    f(t, &y, &mut k1);

    // Initial step guess (Hairer's heuristic, simplified).
    let sc: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
    let d0 = rms(&y, &sc);
    let d1 = rms(&k1, &sc);
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(opts.h_max).min(span).max(1e-8);

    let mut steps = 0usize;
    let mut err_prev: f64 = 1e-4;
    loop {
        let remaining = (t1 - t) * dir;
        if remaining <= 1e-15 * span.max(1.0) {
            break;
        }
        if steps >= opts.max_steps {
            return Err(LabError::StepBudget(opts.max_steps));
        }
        let mut last = false;
        if h >= remaining {
            h = remaining;
            last = true;
        }
        let hs = h * dir;

        for i in 0..n {
            tmp[i] = y[i] + hs * A21 * k1[i];
        }
        f(t + C2 * hs, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        f(t + C3 * hs, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        f(t + C4 * hs, &tmp, &mut k4);
        for i in 0..n {
            tmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        f(t + C5 * hs, &tmp, &mut k5);
        for i in 0..n {
            tmp[i] = y[i] + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        f(t + hs, &tmp, &mut k6);
        for i in 0..n {
            ynew[i] = y[i] + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        f(t + hs, &ynew, &mut k7);

        let mut err = 0.0;
        for i in 0..n {
            let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let s = opts.atol + opts.rtol * y[i].abs().max(ynew[i].abs());
            err += (e / s) * (e / s);
        }
        let err = (err / n as f64).sqrt();

        if err <= 1.0 || h <= opts.h_min {
            if !err.is_finite() {
                return Err(LabError::StepUnderflow { t, h });
            }
            if keep_dense {
                let mut rc = vec![0.0; 5 * n];
                for i in 0..n {
                    let ydiff = ynew[i] - y[i];
                    let bspl = hs * k1[i] - ydiff;
                    rc[i] = y[i];
                    rc[n + i] = ydiff;
                    rc[2 * n + i] = bspl;
                    rc[3 * n + i] = ydiff - hs * k7[i] - bspl;
                    rc[4 * n + i] =
                        hs * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
                }
                segments.push(Segment { t0: t, h: hs, rc });
            }
            t = if last { t1 } else { t + hs };
            std::mem::swap(&mut y, &mut ynew);
            std::mem::swap(&mut k1, &mut k7);
            steps += 1;
            // PI step-size control.
            let fac = 0.9 * err.max(1e-10).powf(-0.17) * err_prev.powf(0.04);
            err_prev = err.max(1e-4);
            h = (h * fac.clamp(0.2, 5.0)).min(opts.h_max);
            if stop(t, &y) {
                return Ok(OdeOutcome {
                    t,
                    y,
                    dense: keep_dense.then_some(DenseOutput { dim: n, segments }),
                    stopped: true,
                    steps,
                });
            }
            if last {
                break;
            }
        } else {
            let fac = 0.9 * err.powf(-0.2);
            h *= fac.clamp(0.1, 1.0);
            if h < opts.h_min {
                return Err(LabError::StepUnderflow { t, h });
            }
        }
    }
    Ok(OdeOutcome {
        t,
        y,
        dense: keep_dense.then_some(DenseOutput { dim: n, segments }),
        stopped: false,
        steps,
    })
}

/// Same tableau with a fixed number of equal steps (used for order checks).
pub fn dopri5_fixed<F>(f: F, t0: f64, y0: &[f64], t1: f64, n_steps: usize) -> Vec<f64>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let h = (t1 - t0) / n_steps as f64;
    let mut y = y0.to_vec();
    let mut k = vec![vec![0.0; n]; 6];
    let mut tmp = vec![0.0; n];
    let a: [&[f64]; 6] = [
        &[],
        &[A21],
        &[A31, A32],
        &[A41, A42, A43],
        &[A51, A52, A53, A54],
        &[A61, A62, A63, A64, A65],
    ];
    let c = [0.0, C2, C3, C4, C5, 1.0];
    let b = [A71, 0.0, A73, A74, A75, A76];
    for s in 0..n_steps {
        let t = t0 + s as f64 * h;
        for st in 0..6 {
            for i in 0..n {
                tmp[i] = y[i] + h * a[st].iter().enumerate().map(|(j, aj)| aj * k[j][i]).sum::<f64>();
            }
            let (done, rest) = k.split_at_mut(st);
            let _ = done;
            f(t + c[st] * h, &tmp, &mut rest[0]);
        }
        for i in 0..n {
            y[i] += h * (0..6).map(|j| b[j] * k[j][i]).sum::<f64>();
        }
    }
    y
}

fn rms(v: &[f64], sc: &[f64]) -> f64 {
    (v.iter().zip(sc).map(|(a, s)| (a / s) * (a / s)).sum::<f64>() / v.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oscillator(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = y[1];
        dy[1] = -y[0];
    }

    #[test]
    fn harmonic_oscillator_full_period() {
        let out = dopri5(oscillator, 0.0, &[1.0, 0.0], 2.0 * std::f64::consts::PI, &OdeOptions::default(), true, |_, _| false).unwrap();
        assert!((out.y[0] - 1.0).abs() < 1e-9);
        assert!(out.y[1].abs() < 1e-9);
        let dense = out.dense.unwrap();
        for k in 0..50 {
            let t = 0.123 * k as f64;
            let y = dense.eval(t);
            assert!((y[0] - t.cos()).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn backward_integration_and_dense() {
        let out = dopri5(oscillator, 1.0, &[1.0_f64.cos(), -1.0_f64.sin()], -2.0, &OdeOptions::default(), true, |_, _| false).unwrap();
        assert!((out.y[0] - (-2.0_f64).cos()).abs() < 1e-9);
        let d = out.dense.unwrap();
        assert!((d.eval(-0.5)[0] - (-0.5_f64).cos()).abs() < 1e-8);
    }

    #[test]
    fn fixed_step_is_fifth_order() {
        let exact = 3.0_f64.cos();
        let e1 = (dopri5_fixed(oscillator, 0.0, &[1.0, 0.0], 3.0, 20)[0] - exact).abs();
        let e2 = (dopri5_fixed(oscillator, 0.0, &[1.0, 0.0], 3.0, 40)[0] - exact).abs();
        assert!((e1 / e2).log2() > 4.5);
    }

    #[test]
    fn stop_predicate_halts() {
        let out = dopri5(oscillator, 0.0, &[1.0, 0.0], 10.0, &OdeOptions::default(), false, |_, y| y[0] < 0.0).unwrap();
        assert!(out.stopped);
        assert!(out.t < 2.0);
    }
}
