//! Fermi coordinates about a geodesic segment, built numerically from the
//! normal exponential map of a parallel orthonormal normal frame.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{InverseMetric, MetricChart, PhasePoint};
use crate::error::{LabError, Result};
use crate::flow;
use crate::ode::{dopri5, DenseOutput, OdeOptions};

/// Overhang of the axis beyond `[0, 1]` in normalized units.
const AXIS_MARGIN: f64 = 0.1;
const MAP_TOL: f64 = 1e-12;

#[derive(Debug)]
struct FermiData {
    ambient: MetricChart,
    n: usize,
    length: f64,
    r_tube: f64,
    fwd: DenseOutput,
    bwd: DenseOutput,
}

/// Normalized Fermi chart: coordinates `X = (s, y)/L` with the segment on the
/// unit axis. The inverse metric is `ginv_F(L·X)`, which is the identity on the axis.
#[derive(Debug, Clone)]
pub struct FermiChart {
    data: Arc<FermiData>,
}

fn transport_rhs(chart: &MetricChart) -> impl Fn(f64, &[f64], &mut [f64]) + '_ {
    let n = chart.n();
    move |_t, y, dy| {
        let x = &y[..n];
        chart.half_field(x, &y[n..2 * n], dy);
        let gam = chart.christoffel(x);
        let v = &dy[..n].to_vec();
        for c in 0..n - 1 {
            let e = &y[2 * n + c * n..2 * n + (c + 1) * n];
            for k in 0..n {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        s += gam[k][(i, j)] * v[i] * e[j];
                    }
                }
                dy[2 * n + c * n + k] = -s;
            }
        }
    }
}

/// Build the Fermi chart of the unit-speed geodesic from `start` of length `length`.
pub fn fermi_chart(ambient: &MetricChart, start: &PhasePoint, length: f64, r_tube: f64) -> Result<FermiChart> {
    let n = ambient.n();
    if !(length > 0.0 && r_tube > 0.0) {
        return Err(LabError::InvalidParams("length and r_tube must be positive".into()));
    }
    let p = ambient.symbol(start)?;
    if (p - 1.0).abs() > 1e-8 {
        return Err(LabError::InvalidParams(format!("start must have unit energy, got {p}")));
    }
    let g0 = ambient.metric_tensor(&start.x);
    let v0 = ambient.ginv(&start.x) * DVector::from_column_slice(&start.xi);
    // g-orthonormal complement of the velocity.
    let mut frame: Vec<DVector<f64>> = vec![v0.clone()];
    for k in 0..n {
        let mut e = DVector::zeros(n);
        e[k] = 1.0;
        for f in &frame {
            let c = e.dot(&(&g0 * f)) / f.dot(&(&g0 * f));
            e -= f * c;
        }
        let nn = e.dot(&(&g0 * &e)).sqrt();
        if nn > 1e-6 {
            frame.push(e / nn);
        }
        if frame.len() == n {
            break;
        }
    }
    let mut y0 = start.to_state();
    for e in &frame[1..] {
        y0.extend(e.iter());
    }
    let opts = OdeOptions::with_tol(flow::DEFAULT_TOL);
    let rhs = transport_rhs(ambient);
    let run = |t1: f64| -> Result<DenseOutput> {
        let out = dopri5(&rhs, 0.0, &y0, t1, &opts, true, |_, y| !ambient.contains(&y[..n]))?;
        if out.stopped {
            return Err(LabError::ChartExit { t: out.t });
        }
        Ok(out.dense.expect("dense"))
    };
    let fc = FermiChart {
        data: Arc::new(FermiData {
            ambient: ambient.clone(),
            n,
            length,
            r_tube,
            fwd: run(length * (1.0 + AXIS_MARGIN))?,
            bwd: run(-length * AXIS_MARGIN)?,
        }),
    };
    fc.check_simple()?;
    Ok(fc)
}

impl FermiChart {
    pub fn ambient(&self) -> &MetricChart {
        &self.data.ambient
    }

    pub fn length(&self) -> f64 {
        self.data.length
    }

    pub fn r_tube(&self) -> f64 {
        self.data.r_tube
    }

    /// Axis phase point and parallel g-orthonormal normal frame at arclength `s`.
    pub fn axis(&self, s: f64) -> (PhasePoint, Vec<DVector<f64>>) {
        let d = &self.data;
        let n = d.n;
        let st = if s >= 0.0 { d.fwd.eval(s) } else { d.bwd.eval(s) };
        let p = PhasePoint::from_state(&st[..2 * n]);
        let g = d.ambient.metric_tensor(&p.x);
        let v = d.ambient.ginv(&p.x) * DVector::from_column_slice(&p.xi);
        let mut basis = vec![v];
        for c in 0..n - 1 {
            let mut e = DVector::from_column_slice(&st[2 * n + c * n..2 * n + (c + 1) * n]);
            for f in &basis {
                let k = e.dot(&(&g * f)) / f.dot(&(&g * f));
                e -= f * k;
            }
            let nn = e.dot(&(&g * &e)).sqrt();
            basis.push(e / nn);
        }
        basis.remove(0);
        (p, basis)
    }

    /// Chart map `Ψ(s, y)` in unnormalized Fermi coordinates and its Jacobian.
    pub fn map_unnormalized(&self, sy: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let d = &self.data;
        let n = d.n;
        let (p, frame) = self.axis(sy[0]);
        let x = &p.x;
        let v = d.ambient.ginv(x) * DVector::from_column_slice(&p.xi);
        let mut yv = DVector::zeros(n);
        for (e, yi) in frame.iter().zip(&sy[1..]) {
            yv += e * *yi;
        }
        let g = d.ambient.metric_tensor(x);
        let mut dpsi = DMatrix::zeros(n, n);
        if yv.norm() < 1e-14 {
            dpsi.set_column(0, &v);
            for (c, e) in frame.iter().enumerate() {
                dpsi.set_column(c + 1, e);
            }
            return Ok((x.clone(), dpsi));
        }
        let eta = &g * &yv;
        let jet = flow::integrate_jet(&d.ambient, &PhasePoint::new(x.clone(), eta.iter().copied().collect()), 1.0, MAP_TOL)?;
        let phi = &jet.jacobian;
        let mut y1 = jet.terminal.x.clone();
        // Undo the reduction so the map is continuous near the axis point.
        let dx = d.ambient.delta(&y1, x);
        for i in 0..n {
            y1[i] = x[i] + dx[i];
        }
        // ∂/∂s: base moves with v, the covector g·Y changes by (∂_v g)Y − gΓ(v, Y).
        let dgi = d.ambient.dginv(x);
        let gam = d.ambient.christoffel(x);
        let mut dg_v = DMatrix::zeros(n, n);
        for k in 0..n {
            dg_v -= &g * &dgi[k] * &g * v[k];
        }
        let gam_vy = DVector::from_fn(n, |k, _| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += gam[k][(i, j)] * v[i] * yv[j];
                }
            }
            s
        });
        let eta_s = &dg_v * &yv - &g * gam_vy;
        let mut seed = DVector::zeros(2 * n);
        for i in 0..n {
            seed[i] = v[i];
            seed[n + i] = eta_s[i];
        }
        let col_s = phi * seed;
        for i in 0..n {
            dpsi[(i, 0)] = col_s[i];
        }
        for (c, e) in frame.iter().enumerate() {
            let ge = &g * e;
            let mut seed = DVector::zeros(2 * n);
            for i in 0..n {
                seed[n + i] = ge[i];
            }
            let col = phi * seed;
            for i in 0..n {
                dpsi[(i, c + 1)] = col[i];
            }
        }
        Ok((y1, dpsi))
    }

    /// Chart map in normalized coordinates `X`: returns `Ψ(L X)` and `dΨ/d(s, y)`.
    pub fn map(&self, xn: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let l = self.data.length;
        let sy: Vec<f64> = xn.iter().map(|v| v * l).collect();
        self.map_unnormalized(&sy)
    }

    /// Newton inversion of the normalized chart map; `None` outside the tube.
    pub fn inverse(&self, x: &[f64]) -> Option<Vec<f64>> {
        let d = &self.data;
        let n = d.n;
        let l = d.length;
        // Seed from the nearest axis sample.
        let mut best = (f64::INFINITY, 0.0);
        let m = 240;
        for k in 0..=m {
            let s = l * (-AXIS_MARGIN + (1.0 + 2.0 * AXIS_MARGIN) * k as f64 / m as f64);
            let (p, _) = self.axis(s);
            let dx = d.ambient.delta(x, &p.x);
            let dist = dx.iter().map(|v| v * v).sum::<f64>();
            if dist < best.0 {
                best = (dist, s);
            }
        }
        if best.0.sqrt() > 2.0 * d.r_tube {
            return None;
        }
        let (p, frame) = self.axis(best.1);
        let g = d.ambient.metric_tensor(&p.x);
        let dx = DVector::from_vec(d.ambient.delta(x, &p.x));
        let mut sy = vec![best.1];
        for e in &frame {
            sy.push(e.dot(&(&g * &dx)));
        }
        for _ in 0..30 {
            let (y, j) = self.map_unnormalized(&sy).ok()?;
            let r = DVector::from_vec(d.ambient.delta(&y, x));
            let step = j.lu().solve(&r)?;
            for i in 0..n {
                sy[i] -= step[i];
            }
            if step.amax() < 1e-13 {
                return Some(sy.iter().map(|v| v / l).collect());
            }
        }
        None
    }

    /// Refuse segments whose tube would overlap itself.
    fn check_simple(&self) -> Result<()> {
        let d = &self.data;
        let m = ((d.length / 0.01).ceil() as usize).max(20);
        let pts: Vec<Vec<f64>> = (0..=m).map(|k| self.axis(d.length * k as f64 / m as f64).0.x).collect();
        let gap = 4.0 * d.r_tube;
        let mut close = Vec::new();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let ds = d.length * (j - i) as f64 / m as f64;
                if ds <= gap {
                    continue;
                }
                let dist = d.ambient.delta(&pts[i], &pts[j]).iter().map(|v| v * v).sum::<f64>().sqrt();
                if dist < 2.0 * d.r_tube {
                    close.push((i, j, dist));
                }
            }
        }
        if close.is_empty() {
            Ok(())
        } else {
            Err(LabError::Refused(format!(
                "segment is not simple in a tube of radius {}: {} near-self-intersections",
                d.r_tube,
                close.len()
            )))
        }
    }

    /// Axis check of the Fermi condition: `max |g^{ij} − δ|` and max transverse
    /// derivative size over samples of the unit axis.
    pub fn axis_defects(&self, samples: usize) -> (f64, f64) {
        let n = self.data.n;
        let mut dmet: f64 = 0.0;
        let mut dder: f64 = 0.0;
        for k in 0..samples {
            let t = (k as f64 + 0.5) / samples as f64;
            let mut x = vec![0.0; n];
            x[0] = t;
            dmet = dmet.max((self.ginv(&x) - DMatrix::identity(n, n)).abs().max());
            for d in self.dginv(&x).iter().skip(1) {
                dder = dder.max(d.abs().max());
            }
        }
        (dmet, dder)
    }
}

impl InverseMetric for FermiChart {
    fn dim(&self) -> usize {
        self.data.n
    }

    fn periods(&self) -> Vec<Option<f64>> {
        vec![None; self.data.n]
    }

    fn contains(&self, x: &[f64]) -> bool {
        let l = self.data.length;
        let rad = x[1..].iter().map(|v| v * v).sum::<f64>().sqrt() * l;
        x[0] >= -AXIS_MARGIN && x[0] <= 1.0 + AXIS_MARGIN && rad <= self.data.r_tube
    }

    fn ginv(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.data.n;
        match self.map(x) {
            Ok((y, j)) => match j.try_inverse() {
                Some(ji) => {
                    let m = &ji * self.data.ambient.ginv(&y) * ji.transpose();
                    (&m + m.transpose()) * 0.5
                }
                None => DMatrix::from_element(n, n, f64::NAN),
            },
            Err(_) => DMatrix::from_element(n, n, f64::NAN),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams};

    #[test]
    fn flat_fermi_chart_is_euclidean() {
        let flat = make_model(ModelName::FlatTorus, &ModelParams::default()).unwrap().chart;
        let fc = fermi_chart(&flat, &PhasePoint::new(vec![1.0, 2.0], vec![1.0, 0.0]), 1.5, 0.3).unwrap();
        for x in [[0.2, 0.1], [0.7, -0.15], [0.95, 0.0]] {
            assert!((fc.ginv(&x) - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        }
        let (y, _) = fc.map(&[0.5, 0.1]).unwrap();
        assert!((y[0] - 1.75).abs() < 1e-10 && (y[1] - 2.15).abs() < 1e-10);
    }

    #[test]
    fn sphere_equator_matches_closed_form() {
        let s = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let fc = fermi_chart(&s, &PhasePoint::new(vec![0.5, 0.0], vec![1.0, 0.0]), 1.0, 0.3).unwrap();
        for x in [[0.3, 0.2], [0.8, -0.25], [0.5, 0.05]] {
            let g = fc.ginv(&x);
            let c = x[1].cos();
            assert!((g[(0, 0)] - 1.0 / (c * c)).abs() < 1e-8, "{g}");
            assert!(g[(0, 1)].abs() < 1e-8);
            assert!((g[(1, 1)] - 1.0).abs() < 1e-8);
        }
        let (dm, dd) = fc.axis_defects(8);
        assert!(dm < 1e-8);
        assert!(dd < 1e-5);
    }

    #[test]
    fn bumped_torus_axis_property_and_inverse() {
        let b = make_model(ModelName::ConformalBumpTorus, &ModelParams::default()).unwrap().chart;
        let start = PhasePoint::new(vec![2.0, 2.7], vec![1.0, 0.0]);
        let e = b.symbol(&start).unwrap();
        let start = start.scale_xi(1.0 / e.sqrt());
        let fc = fermi_chart(&b, &start, 1.2, 0.3).unwrap();
        let (dm, dd) = fc.axis_defects(6);
        assert!(dm < 1e-8, "{dm}");
        assert!(dd < 1e-5, "{dd}");
        let (y, _) = fc.map(&[0.4, 0.1]).unwrap();
        let back = fc.inverse(&y).unwrap();
        assert!((back[0] - 0.4).abs() < 1e-10 && (back[1] - 0.1).abs() < 1e-10);
    }

    #[test]
    fn long_equator_segment_is_refused() {
        let s = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let r = fermi_chart(&s, &PhasePoint::new(vec![0.0, 0.0], vec![1.0, 0.0]), 6.2, 0.3);
        assert!(matches!(r, Err(LabError::Refused(_))));
    }
}
