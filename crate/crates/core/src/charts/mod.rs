//! Metrics in coordinate charts, the principal symbol and its Hamilton field.

mod export;
pub mod fermi;
mod models;

use std::fmt::Debug;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub use export::{export_grid_csv, ModelSpec};
pub use fermi::{fermi_chart, FermiChart};
pub use models::*;

/// Point of the cotangent bundle in chart coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, xi: Vec<f64>) -> Self {
        Self { x, xi }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn to_state(&self) -> Vec<f64> {
        let mut s = self.x.clone();
        s.extend_from_slice(&self.xi);
        s
    }

    pub fn from_state(s: &[f64]) -> Self {
        let n = s.len() / 2;
        Self {
            x: s[..n].to_vec(),
            xi: s[n..2 * n].to_vec(),
        }
    }

    pub fn scale_xi(&self, c: f64) -> Self {
        Self {
            x: self.x.clone(),
            xi: self.xi.iter().map(|v| c * v).collect(),
        }
    }
}

/// Inverse metric `g^{ij}` of a single chart together with its derivatives.
///
/// The default derivative implementations are central differences; analytic
/// models override them.
pub trait InverseMetric: Send + Sync + Debug {
    fn dim(&self) -> usize;

    /// Period of each coordinate, if it is identified periodically.
    fn periods(&self) -> Vec<Option<f64>>;

    fn contains(&self, x: &[f64]) -> bool;

    fn ginv(&self, x: &[f64]) -> DMatrix<f64>;

    /// `out[k] = ∂_k g^{ij}`.
    fn dginv(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        fd_gradient(|y| self.ginv(y), x, 1e-5)
    }

    /// `out[k][l] = ∂_k ∂_l g^{ij}`, symmetric in `(k, l)`.
    fn d2ginv(&self, x: &[f64]) -> Vec<Vec<DMatrix<f64>>> {
        fd_hessian_from_gradient(|y| self.dginv(y), x, 1e-4)
    }
}

/// Central differences of a matrix-valued map, step `h·(1+|x_k|)`.
pub fn fd_gradient<F>(f: F, x: &[f64], h: f64) -> Vec<DMatrix<f64>>
where
    F: Fn(&[f64]) -> DMatrix<f64>,
{
    let mut y = x.to_vec();
    (0..x.len())
        .map(|k| {
            let hk = h * (1.0 + x[k].abs());
            y[k] = x[k] + hk;
            let fp = f(&y);
            y[k] = x[k] - hk;
            let fm = f(&y);
            y[k] = x[k];
            (fp - fm) / (2.0 * hk)
        })
        .collect()
}

/// Symmetrized central differences of a gradient map.
pub fn fd_hessian_from_gradient<F>(df: F, x: &[f64], h: f64) -> Vec<Vec<DMatrix<f64>>>
where
    F: Fn(&[f64]) -> Vec<DMatrix<f64>>,
{
    let n = x.len();
    let mut y = x.to_vec();
    let mut raw: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(n);
    for l in 0..n {
        let hl = h * (1.0 + x[l].abs());
        y[l] = x[l] + hl;
        let dp = df(&y);
        y[l] = x[l] - hl;
        let dm = df(&y);
        y[l] = x[l];
        raw.push(dp.iter().zip(&dm).map(|(a, b)| (a - b) / (2.0 * hl)).collect());
    }
    // raw[l][k] = ∂_l ∂_k; symmetrize.
    (0..n)
        .map(|k| (0..n).map(|l| (&raw[l][k] + &raw[k][l]) * 0.5).collect())
        .collect()
}

/// Wrap a coordinate difference into `[-P/2, P/2)`.
pub fn wrap_delta(d: f64, period: f64) -> f64 {
    d - period * (d / period + 0.5).floor()
}

/// Immutable, shareable handle on a chart metric.
#[derive(Debug, Clone)]
pub struct MetricChart {
    inner: Arc<dyn InverseMetric>,
}

impl MetricChart {
    pub fn new<M: InverseMetric + 'static>(m: M) -> Self {
        Self { inner: Arc::new(m) }
    }

    pub fn from_arc(inner: Arc<dyn InverseMetric>) -> Self {
        Self { inner }
    }

    pub fn metric(&self) -> &Arc<dyn InverseMetric> {
        &self.inner
    }

    pub fn n(&self) -> usize {
        self.inner.dim()
    }

    pub fn periods(&self) -> Vec<Option<f64>> {
        self.inner.periods()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.inner.contains(x)
    }

    pub fn ginv(&self, x: &[f64]) -> DMatrix<f64> {
        self.inner.ginv(x)
    }

    pub fn dginv(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        self.inner.dginv(x)
    }

    pub fn d2ginv(&self, x: &[f64]) -> Vec<Vec<DMatrix<f64>>> {
        self.inner.d2ginv(x)
    }

    fn check(&self, p: &PhasePoint) -> Result<()> {
        let n = self.n();
        if p.x.len() != n || p.xi.len() != n {
            return Err(LabError::Dimension {
                expected: n,
                got: p.x.len().max(p.xi.len()),
            });
        }
        if !self.contains(&p.x) {
            return Err(LabError::OutOfChart { point: p.x.clone() });
        }
        Ok(())
    }

    /// `p(x, ξ) = g^{ij}(x) ξ_i ξ_j`.
    pub fn symbol(&self, p: &PhasePoint) -> Result<f64> {
        self.check(p)?;
        Ok(self.symbol_unchecked(&p.x, &p.xi))
    }

    pub(crate) fn symbol_unchecked(&self, x: &[f64], xi: &[f64]) -> f64 {
        let g = self.ginv(x);
        let v = DVector::from_column_slice(xi);
        v.dot(&(&g * &v))
    }

    /// `H_p = (∂p/∂ξ, −∂p/∂x)`, twice the geometer's flow velocity.
    pub fn hamilton_field(&self, p: &PhasePoint) -> Result<Vec<f64>> {
        self.check(p)?;
        let mut out = vec![0.0; 2 * self.n()];
        self.half_field(&p.x, &p.xi, &mut out);
        out.iter_mut().for_each(|v| *v *= 2.0);
        Ok(out)
    }

    /// `½H_p` written into `out`, without domain checks.
    pub(crate) fn half_field(&self, x: &[f64], xi: &[f64], out: &mut [f64]) {
        let n = self.n();
        let g = self.ginv(x);
        let dg = self.dginv(x);
        let v = DVector::from_column_slice(xi);
        let gv = &g * &v;
        for i in 0..n {
            out[i] = gv[i];
            out[n + i] = -0.5 * v.dot(&(&dg[i] * &v));
        }
    }

    /// Reduce coordinates modulo the periodic identifications.
    pub fn reduce(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.periods())
            .map(|(&xi, p)| match p {
                Some(p) => xi.rem_euclid(p),
                None => xi,
            })
            .collect()
    }

    /// Coordinate difference `a − b` with periodic components wrapped.
    pub fn delta(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(b)
            .zip(self.periods())
            .map(|((&ai, &bi), p)| match p {
                Some(p) => wrap_delta(ai - bi, p),
                None => ai - bi,
            })
            .collect()
    }

    /// Max-norm distance of two phase points, positions compared modulo periods.
    pub fn phase_distance(&self, a: &PhasePoint, b: &PhasePoint) -> f64 {
        let dx = self.delta(&a.x, &b.x);
        dx.iter()
            .chain(a.xi.iter().zip(&b.xi).map(|(u, v)| u - v).collect::<Vec<_>>().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Metric `g_{ij}` (inverse of `ginv`).
    pub fn metric_tensor(&self, x: &[f64]) -> DMatrix<f64> {
        self.ginv(x).try_inverse().expect("inverse metric is positive definite")
    }

    /// `g(v, w)` for tangent vectors.
    pub fn inner(&self, x: &[f64], v: &[f64], w: &[f64]) -> f64 {
        let g = self.metric_tensor(x);
        DVector::from_column_slice(v).dot(&(&g * DVector::from_column_slice(w)))
    }

    /// Christoffel symbols `Γ^k_{ij}`, indexed `[k][(i, j)]`.
    pub fn christoffel(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.n();
        let g = self.metric_tensor(x);
        let dgi = self.dginv(x);
        // ∂_k g = −g (∂_k g^{-1}) g
        let dg: Vec<DMatrix<f64>> = dgi.iter().map(|d| -(&g * d * &g)).collect();
        let gi = self.ginv(x);
        (0..n)
            .map(|k| {
                DMatrix::from_fn(n, n, |i, j| {
                    (0..n)
                        .map(|l| 0.5 * gi[(k, l)] * (dg[i][(l, j)] + dg[j][(l, i)] - dg[l][(i, j)]))
                        .sum()
                })
            })
            .collect()
    }

    /// Sample-based check of symmetry, positivity and derivative consistency.
    pub fn check_invariants(&self, points: &[Vec<f64>]) -> ChartDiagnostics {
        let mut d = ChartDiagnostics::default();
        for x in points {
            if !self.contains(x) {
                continue;
            }
            d.samples += 1;
            let g = self.ginv(x);
            d.max_asymmetry = d.max_asymmetry.max((&g - g.transpose()).abs().max());
            let ev = g.clone().symmetric_eigenvalues().min();
            d.min_eigenvalue = d.min_eigenvalue.min(ev);
            let fd = fd_gradient(|y| self.ginv(y), x, 1e-5);
            let an = self.dginv(x);
            for (a, b) in an.iter().zip(&fd) {
                d.max_dginv_error = d.max_dginv_error.max((a - b).abs().max());
            }
        }
        d
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChartDiagnostics {
    pub samples: usize,
    pub max_asymmetry: f64,
    pub min_eigenvalue: f64,
    pub max_dginv_error: f64,
}

impl Default for ChartDiagnostics {
    fn default() -> Self {
        Self {
            samples: 0,
            max_asymmetry: 0.0,
            min_eigenvalue: f64::INFINITY,
            max_dginv_error: 0.0,
        }
    }
}
