use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::charts::ScalarField;
use crate::error::{LabError, Result};
use crate::linalg::gauss_legendre;

/// Value, gradient and Hessian of a scalar function at one point.
#[derive(Debug, Clone)]
struct Jet {
    v: f64,
    g: DVector<f64>,
    h: DMatrix<f64>,
}

impl Jet {
    fn constant(n: usize, v: f64) -> Self {
        Self {
            v,
            g: DVector::zeros(n),
            h: DMatrix::zeros(n, n),
        }
    }

    fn mul(&self, o: &Jet) -> Jet {
        let cross = &self.g * o.g.transpose();
        Jet {
            v: self.v * o.v,
            g: &o.g * self.v + &self.g * o.v,
            h: &o.h * self.v + &self.h * o.v + &cross + cross.transpose(),
        }
    }
}

fn edge(s: f64) -> (f64, f64, f64) {
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let f = (-1.0 / s).exp();
    let s2 = s * s;
    (f, f / s2, f * (1.0 / (s2 * s2) - 2.0 / (s2 * s)))
}

/// `ψ(s) = e(s) / (e(s) + e(1-s))` with `e(s) = e^{-1/s}`: 0 for `s ≤ 0`, 1 for `s ≥ 1`.
fn smooth_step(s: f64) -> (f64, f64, f64) {
    let (f, f1, f2) = edge(s);
    let (g0, g1, g2) = edge(1.0 - s);
    let (g, dg, ddg) = (g0, -g1, g2);
    let q = f + g;
    let (q1, q2) = (f1 + dg, f2 + ddg);
    let num = f1 * q - f * q1;
    let d1 = num / (q * q);
    let d2 = (f2 * q - f * q2) / (q * q) - 2.0 * q1 * num / (q * q * q);
    (f / q, d1, d2)
}

/// `β((t − m)/w) · Σ c_k (t − m)^k` with `β(q) = exp(−1/(1 − q²))` on `|q| < 1`,
/// where `m`, `w` are the midpoint and half-width of `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisProfile {
    pub lo: f64,
    pub hi: f64,
    pub poly: Vec<f64>,
}

impl AxisProfile {
    pub fn new(lo: f64, hi: f64, poly: Vec<f64>) -> Self {
        Self { lo, hi, poly }
    }

    /// `(a, a', a'')` at `t`.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let m = 0.5 * (self.lo + self.hi);
        let w = 0.5 * (self.hi - self.lo);
        let q = (t - m) / w;
        if q.abs() >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        let d = 1.0 - q * q;
        let b = (-1.0 / d).exp();
        let g1 = -2.0 * q / (d * d);
        let g2 = -2.0 / (d * d) - 8.0 * q * q / (d * d * d);
        let b1 = b * g1 / w;
        let b2 = b * (g1 * g1 + g2) / (w * w);
        let u = t - m;
        let (mut p, mut p1, mut p2) = (0.0, 0.0, 0.0);
        for c in self.poly.iter().rev() {
            p2 = p2 * u + 2.0 * p1;
            p1 = p1 * u + p;
            p = p * u + c;
        }
        (b * p, b1 * p + b * p1, b2 * p + 2.0 * b1 * p1 + b * p2)
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval(t).0
    }

    /// `∫ w(t) a(t) dt` over the support: Gauss–Legendre of the given order on
    /// each half of the support.
    pub fn moment<W: Fn(f64) -> f64>(&self, weight: W, order: usize) -> f64 {
        let (x, wq) = gauss_legendre(order);
        let w = 0.25 * (self.hi - self.lo);
        [self.lo + w, self.hi - w]
            .iter()
            .map(|&m| x.iter().zip(&wq).map(|(xi, wi)| wi * w * weight(m + w * xi) * self.value(m + w * xi)).sum::<f64>())
            .sum()
    }

    pub fn linear_combination(a: &AxisProfile, ca: f64, b: &AxisProfile, cb: f64) -> AxisProfile {
        assert!(a.lo == b.lo && a.hi == b.hi, "profiles must share a support");
        let k = a.poly.len().max(b.poly.len());
        let poly = (0..k)
            .map(|i| ca * a.poly.get(i).copied().unwrap_or(0.0) + cb * b.poly.get(i).copied().unwrap_or(0.0))
            .collect();
        AxisProfile::new(a.lo, a.hi, poly)
    }
}

/// Radial cutoff in the transverse variables `x' = (x_2, …, x_n)`: 1 on
/// `|x'| ≤ r_inner`, 0 on `|x'| ≥ r_outer`. Constant near the axis, so all its
/// transverse derivatives vanish there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TubeCutoff {
    pub r_inner: f64,
    pub r_outer: f64,
}

impl TubeCutoff {
    fn jet(&self, x: &[f64]) -> Jet {
        let n = x.len();
        let r = x[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if r <= self.r_inner {
            return Jet::constant(n, 1.0);
        }
        if r >= self.r_outer {
            return Jet::constant(n, 0.0);
        }
        let d = self.r_outer - self.r_inner;
        let (v, s1, s2) = smooth_step((self.r_outer - r) / d);
        let (p1, p2) = (-s1 / d, s2 / (d * d));
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for i in 1..n {
            g[i] = p1 * x[i] / r;
            for j in 1..n {
                let e = x[i] * x[j] / (r * r);
                let delta = if i == j { 1.0 } else { 0.0 };
                h[(i, j)] = p2 * e + p1 * (delta - e) / r;
            }
        }
        Jet { v, g, h }
    }
}

/// `a(x_1) ρ(x')`, optionally multiplied by one transverse coordinate `x_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparableProfile {
    pub axis: AxisProfile,
    pub tube: TubeCutoff,
    #[serde(default)]
    pub linear: Option<usize>,
}

impl SeparableProfile {
    fn jet(&self, x: &[f64]) -> Jet {
        let n = x.len();
        let (a, a1, a2) = self.axis.eval(x[0]);
        if a == 0.0 && a1 == 0.0 && a2 == 0.0 {
            return Jet::constant(n, 0.0);
        }
        let mut ja = Jet::constant(n, a);
        ja.g[0] = a1;
        ja.h[(0, 0)] = a2;
        let mut j = ja.mul(&self.tube.jet(x));
        if let Some(k) = self.linear {
            let mut jl = Jet::constant(n, x[k]);
            jl.g[k] = 1.0;
            j = j.mul(&jl);
        }
        j
    }

    /// Upper bound of `|f|` on its support.
    fn sup_bound(&self) -> f64 {
        let m = 400;
        let amax = (0..=m)
            .map(|k| self.axis.value(self.axis.lo + (self.axis.hi - self.axis.lo) * k as f64 / m as f64).abs())
            .fold(0.0, f64::max)
            * 1.01;
        amax * if self.linear.is_some() { self.tube.r_outer } else { 1.0 }
    }
}

/// `Σ c_k f_k` as a scalar field on an `n`-dimensional chart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSum {
    pub n: usize,
    pub terms: Vec<(f64, SeparableProfile)>,
}

impl ProfileSum {
    pub fn single(n: usize, p: SeparableProfile) -> Self {
        Self { n, terms: vec![(1.0, p)] }
    }

    fn jet(&self, x: &[f64]) -> Jet {
        let mut acc = Jet::constant(self.n, 0.0);
        for (c, p) in &self.terms {
            if *c == 0.0 {
                continue;
            }
            let j = p.jet(x);
            acc.v += c * j.v;
            acc.g += j.g * *c;
            acc.h += j.h * *c;
        }
        acc
    }

    pub fn sup_bound(&self) -> f64 {
        self.terms.iter().map(|(c, p)| c.abs() * p.sup_bound()).sum()
    }
}

impl ScalarField for ProfileSum {
    fn value(&self, x: &[f64]) -> f64 {
        self.jet(x).v
    }
    fn grad(&self, x: &[f64]) -> Vec<f64> {
        self.jet(x).g.iter().copied().collect()
    }
    fn hess(&self, x: &[f64]) -> DMatrix<f64> {
        self.jet(x).h
    }
}

/// Support margin of the axis profiles: supports lie in `[ALPHA, 1 − ALPHA]`.
pub const ALPHA: f64 = 0.1;
pub const DEFAULT_ORDER: usize = 64;

/// The three families behind the `(2n − 1)`-parameter perturbation, with their
/// computed moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpTriple {
    pub h1: AxisProfile,
    pub h2: AxisProfile,
    pub h3: AxisProfile,
    pub tube: TubeCutoff,
    pub order: usize,
    /// Determinant of the 2×2 moment system solved for `h2` and `h3`.
    pub moment_det: f64,
}

/// `(½∫h, −½∫h, −½∫(1−t)h)` of an axis profile.
pub fn axis_moments(a: &AxisProfile, order: usize) -> (f64, f64, f64) {
    let m0 = a.moment(|_| 1.0, order);
    let m1 = a.moment(|t| 1.0 - t, order);
    (0.5 * m0, -0.5 * m0, -0.5 * m1)
}

/// Builds `h1, h2, h3` with supports `[ALPHA, 1 − ALPHA] × {|x'| < tube_radius}`.
pub fn build_bumps(tube_radius: f64, order: usize) -> Result<BumpTriple> {
    if !(tube_radius > 0.0) {
        return Err(LabError::InvalidParams("tube radius must be positive".into()));
    }
    let phi0 = AxisProfile::new(ALPHA, 1.0 - ALPHA, vec![1.0]);
    let phi1 = AxisProfile::new(ALPHA, 1.0 - ALPHA, vec![0.0, 1.0]);
    let i0 = phi0.moment(|_| 1.0, order);
    let h1 = AxisProfile::new(ALPHA, 1.0 - ALPHA, vec![2.0 / i0]);
    let m = DMatrix::from_row_slice(
        2,
        2,
        &[
            phi0.moment(|_| 1.0, order),
            phi1.moment(|_| 1.0, order),
            phi0.moment(|t| 1.0 - t, order),
            phi1.moment(|t| 1.0 - t, order),
        ],
    ) * -0.5;
    let det = m.determinant();
    if det.abs() < 1e-8 {
        return Err(LabError::RankDeficient(format!("moment system determinant {det:e}")));
    }
    let mi = m.try_inverse().expect("nonsingular moment system");
    let c2 = &mi * DVector::from_column_slice(&[1.0, 0.0]);
    let c3 = &mi * DVector::from_column_slice(&[0.0, 1.0]);
    Ok(BumpTriple {
        h1,
        h2: AxisProfile::linear_combination(&phi0, c2[0], &phi1, c2[1]),
        h3: AxisProfile::linear_combination(&phi0, c3[0], &phi1, c3[1]),
        tube: TubeCutoff {
            r_inner: 0.5 * tube_radius,
            r_outer: tube_radius,
        },
        order,
        moment_det: det,
    })
}

impl BumpTriple {
    /// `f_s = s_1 h_1 + Σ_{i≥2} s_i x_i h_2 + Σ_{i≥2} s_{i+n−1} x_i h_3`.
    pub fn field(&self, n: usize, s: &[f64]) -> Result<ProfileSum> {
        if s.len() != 2 * n - 1 {
            return Err(LabError::Dimension { expected: 2 * n - 1, got: s.len() });
        }
        let sep = |a: &AxisProfile, linear| SeparableProfile {
            axis: a.clone(),
            tube: self.tube.clone(),
            linear,
        };
        let mut terms = vec![(s[0], sep(&self.h1, None))];
        for i in 1..n {
            terms.push((s[i], sep(&self.h2, Some(i))));
        }
        for i in 1..n {
            terms.push((s[i + n - 1], sep(&self.h3, Some(i))));
        }
        Ok(ProfileSum { n, terms })
    }

    /// The field `∂f_s/∂s_j`.
    pub fn component(&self, n: usize, j: usize) -> Result<ProfileSum> {
        let mut s = vec![0.0; 2 * n - 1];
        if j >= s.len() {
            return Err(LabError::Dimension { expected: 2 * n - 1, got: j + 1 });
        }
        s[j] = 1.0;
        let mut f = self.field(n, &s)?;
        f.terms.retain(|(c, _)| *c != 0.0);
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_step_derivatives() {
        for s in [0.2, 0.5, 0.81] {
            let h = 1e-5;
            let (_, d1, d2) = smooth_step(s);
            let fd1 = (smooth_step(s + h).0 - smooth_step(s - h).0) / (2.0 * h);
            let fd2 = (smooth_step(s + h).1 - smooth_step(s - h).1) / (2.0 * h);
            assert!((d1 - fd1).abs() < 1e-8 && (d2 - fd2).abs() < 1e-6);
        }
        assert_eq!(smooth_step(0.0).0, 0.0);
        assert_eq!(smooth_step(1.0).0, 1.0);
    }

    #[test]
    fn axis_profile_derivatives() {
        let a = AxisProfile::new(0.2, 0.7, vec![0.3, -1.0, 2.0]);
        for t in [0.25, 0.4, 0.66] {
            let h = 1e-6;
            let (_, d1, d2) = a.eval(t);
            assert!((d1 - (a.value(t + h) - a.value(t - h)) / (2.0 * h)).abs() < 1e-7);
            assert!((d2 - (a.eval(t + h).1 - a.eval(t - h).1) / (2.0 * h)).abs() < 1e-5);
        }
        assert_eq!(a.eval(0.1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn field_jet_matches_differences() {
        let b = build_bumps(0.2, DEFAULT_ORDER).unwrap();
        let f = b.field(3, &[0.3, -0.5, 0.2, 0.7, 0.4]).unwrap();
        let x = [0.45, 0.13, -0.06];
        let g = f.grad(&x);
        let hs = f.hess(&x);
        let h = 1e-6;
        for k in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[k] += h;
            xm[k] -= h;
            assert!(((f.value(&xp) - f.value(&xm)) / (2.0 * h) - g[k]).abs() < 1e-7);
            let gp = f.grad(&xp);
            let gm = f.grad(&xm);
            for l in 0..3 {
                assert!(((gp[l] - gm[l]) / (2.0 * h) - hs[(k, l)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn moments_hold() {
        let b = build_bumps(0.2, DEFAULT_ORDER).unwrap();
        let (h1, _, _) = axis_moments(&b.h1, 128);
        let (_, a2, b2) = axis_moments(&b.h2, 128);
        let (_, a3, b3) = axis_moments(&b.h3, 128);
        assert!((h1 - 1.0).abs() < 1e-10);
        assert!((a2 - 1.0).abs() < 1e-10 && b2.abs() < 1e-10);
        assert!(a3.abs() < 1e-10 && (b3 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn quadrature_refinement_is_stable() {
        let a = build_bumps(0.2, 64).unwrap();
        let b = build_bumps(0.2, 128).unwrap();
        for (p, q) in [(&a.h1, &b.h1), (&a.h2, &b.h2), (&a.h3, &b.h3)] {
            for (x, y) in p.poly.iter().zip(&q.poly) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{x} {y}");
            }
        }
    }

    #[test]
    fn fs_examples() {
        let b = build_bumps(0.2, DEFAULT_ORDER).unwrap();
        let z = b.field(2, &[0.0; 3]).unwrap();
        assert_eq!(z.value(&[0.5, 0.05]), 0.0);
        let s = [0.3, -0.2, 0.5];
        let f = b.field(2, &s).unwrap();
        for t in [0.2, 0.5, 0.85] {
            assert!((f.value(&[t, 0.0]) - 0.3 * b.h1.value(t)).abs() < 1e-15);
        }
        let s2 = [-0.1, 0.4, 0.05];
        let sum: Vec<f64> = s.iter().zip(&s2).map(|(a, b)| a + b).collect();
        let x = [0.4, 0.07];
        let lhs = b.field(2, &sum).unwrap().value(&x);
        let rhs = f.value(&x) + b.field(2, &s2).unwrap().value(&x);
        assert!((lhs - rhs).abs() < 1e-14);
        assert_eq!(f.value(&[0.5, 0.25]), 0.0);
        assert_eq!(f.value(&[0.05, 0.0]), 0.0);
    }
}
