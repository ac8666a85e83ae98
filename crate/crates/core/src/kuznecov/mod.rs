//! Exact Kuznecov sums `N_Σ(λ) = Σ_{λ_j ≤ λ} |∫_Σ e_j dV_Σ|²` on models with
//! explicit eigendata, plus the leading-term fit and the residual spectrum.

mod fit;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::conormal::SigmaSpec;
use crate::error::{LabError, Result};

pub use fit::{
    fit_leading, frequency_resolution, individual_bound_check, oscillation_spectrum, LeadingFit, Peak, SpectrumOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEntry {
    pub lambda: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KuznecovSeries {
    /// Sorted by λ; one entry per eigenfunction.
    pub entries: Vec<SpectralEntry>,
    pub codim: usize,
    pub model: String,
    /// Largest λ covered completely.
    pub lambda_max: f64,
    #[serde(skip)]
    cumulative: Vec<f64>,
}

impl KuznecovSeries {
    pub fn new(mut entries: Vec<SpectralEntry>, codim: usize, model: &str, lambda_max: f64) -> Self {
        entries.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        let mut acc = 0.0;
        let cumulative = entries
            .iter()
            .map(|e| {
                acc += e.weight;
                acc
            })
            .collect();
        Self { entries, codim, model: model.to_string(), lambda_max, cumulative }
    }

    /// `N(λ)`, right-continuous.
    pub fn count(&self, lambda: f64) -> f64 {
        let k = self.entries.partition_point(|e| e.lambda <= lambda);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// `N` averaged against the triangle kernel of half-width `h` (exact on the
    /// step function); used as an anti-aliasing filter before sampling.
    pub fn smoothed_count(&self, lambda: f64, h: f64) -> f64 {
        let lo = self.entries.partition_point(|e| e.lambda <= lambda - h);
        let hi = self.entries.partition_point(|e| e.lambda < lambda + h);
        let mut acc = if lo == 0 { 0.0 } else { self.cumulative[lo - 1] };
        for e in &self.entries[lo..hi] {
            let u = (lambda - e.lambda) / h;
            let cdf = if u <= 0.0 { 0.5 * (1.0 + u).powi(2) } else { 1.0 - 0.5 * (1.0 - u).powi(2) };
            acc += e.weight * cdf;
        }
        acc
    }

    pub fn total_weight(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Columns: `lambda,weight,cumulative`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,weight,cumulative\n");
        for (e, c) in self.entries.iter().zip(&self.cumulative) {
            out.push_str(&format!("{:.15e},{:.15e},{:.15e}\n", e.lambda, e.weight, c));
        }
        out
    }
}

fn lattice(bounds: &[i64]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for &b in bounds {
        out = out
            .into_iter()
            .flat_map(|p| {
                (-b..=b).map(move |m| {
                    let mut q = p.clone();
                    q.push(m);
                    q
                })
            })
            .collect();
    }
    out
}

/// Flat torus `ℝⁿ / ⊕ L_i ℤ` with eigenfunctions `e^{i k·x} / √vol`,
/// `k_i = 2π m_i / L_i`.
pub fn torus_series(periods: &[f64], sigma: &SigmaSpec, lambda_max: f64) -> Result<KuznecovSeries> {
    let n = periods.len();
    if n < 2 || periods.iter().any(|p| !(*p > 0.0)) {
        return Err(LabError::InvalidParams("torus periods must be positive, n ≥ 2".into()));
    }
    if !(lambda_max > 0.0) {
        return Err(LabError::InvalidParams("lambda_max must be positive".into()));
    }
    let vol: f64 = periods.iter().product();
    let (codim, line_len) = match sigma {
        SigmaSpec::TorusLine { period, .. } => {
            if n != 2 || (period - periods[0]).abs() > 1e-12 {
                return Err(LabError::Unsupported("torus lines are horizontal closed geodesics of a 2-torus".into()));
            }
            (1, Some(periods[0]))
        }
        SigmaSpec::Point { x } if x.len() == n => (n, None),
        other => return Err(LabError::Unsupported(format!("sigma {other:?} on the torus"))),
    };
    let scale: Vec<f64> = periods.iter().map(|l| 2.0 * PI / l).collect();
    let bounds: Vec<i64> = scale.iter().map(|s| (lambda_max / s).floor() as i64).collect();
    let entries: Vec<SpectralEntry> = lattice(&bounds)
        .into_iter()
        .filter_map(|m| {
            let lambda = m.iter().zip(&scale).map(|(&mi, s)| (mi as f64 * s).powi(2)).sum::<f64>().sqrt();
            if lambda > lambda_max {
                return None;
            }
            let weight = match line_len {
                // ∫ over {x₂ = c} of e^{i k·x}/√vol vanishes unless m₁ = 0; then |·|² = L₁²/vol.
                Some(l1) => {
                    if m[0] == 0 {
                        l1 * l1 / vol
                    } else {
                        0.0
                    }
                }
                None => 1.0 / vol,
            };
            Some(SpectralEntry { lambda, weight })
        })
        .collect();
    Ok(KuznecovSeries::new(entries, codim, "flat_torus", lambda_max))
}

/// `√((2l+1)/(4π)) P_l(z)` for `l = 0..=l_max` by the normalized upward recurrence.
pub fn normalized_legendre(z: f64, l_max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(l_max + 1);
    let c = 1.0 / (4.0 * PI).sqrt();
    // q_l = √(2l+1) P_l.
    let mut q_prev = 1.0;
    out.push(c * q_prev);
    if l_max == 0 {
        return out;
    }
    let mut q = 3f64.sqrt() * z;
    out.push(c * q);
    for l in 1..l_max {
        let lf = l as f64;
        let next = ((2.0 * lf + 3.0).sqrt() / (lf + 1.0))
            * ((2.0 * lf + 1.0).sqrt() * z * q - lf * q_prev / (2.0 * lf - 1.0).sqrt());
        q_prev = q;
        q = next;
        out.push(c * q);
    }
    out
}

/// Latitude of the circle Σ on the unit sphere: the equator or `u = u0`.
pub fn sphere_latitude(sigma: &SigmaSpec) -> Result<f64> {
    match sigma {
        SigmaSpec::PolarGreatCircle { .. } => Ok(0.0),
        SigmaSpec::LatitudeCircle { u0, .. } if u0.abs() < PI / 2.0 => Ok(*u0),
        other => Err(LabError::Unsupported(format!("sigma {other:?} on the sphere"))),
    }
}

/// Unit sphere: `λ_l = √(l(l+1))`, multiplicity `2l+1`; only the zonal
/// harmonic about the circle's axis integrates to a nonzero value.
pub fn sphere_series(sigma: &SigmaSpec, l_max: usize) -> Result<KuznecovSeries> {
    let u0 = sphere_latitude(sigma)?;
    let circ = 2.0 * PI * u0.cos();
    let y = normalized_legendre(u0.sin(), l_max);
    let mut entries = Vec::with_capacity((l_max + 1).pow(2));
    for (l, yl) in y.iter().enumerate() {
        let lambda = ((l * (l + 1)) as f64).sqrt();
        entries.push(SpectralEntry { lambda, weight: (circ * yl).powi(2) });
        for _ in 0..2 * l {
            entries.push(SpectralEntry { lambda, weight: 0.0 });
        }
    }
    let lambda_max = ((l_max * (l_max + 1)) as f64).sqrt();
    Ok(KuznecovSeries::new(entries, 1, "round_sphere", lambda_max))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line() -> SigmaSpec {
        SigmaSpec::TorusLine { value: 0.0, period: 2.0 * PI, sheet_period: 2.0 * PI }
    }

    #[test]
    fn torus_line_counts() {
        let s = torus_series(&[2.0 * PI, 2.0 * PI], &line(), 10.5).unwrap();
        assert_eq!(s.count(10.5), 21.0);
        assert_eq!(s.count(0.999), 1.0);
        assert_eq!(s.count(1.0), 3.0);
        // Brute-force oracle: lattice points with m₁ = 0 and m₂² ≤ λ².
        let big = torus_series(&[2.0 * PI, 2.0 * PI], &line(), 60.0).unwrap();
        for k in 0..600 {
            let lam = k as f64 * 0.1 + 0.05;
            let brute = (-60i64..=60).filter(|m| ((m * m) as f64) <= lam * lam).count() as f64;
            assert_eq!(big.count(lam), brute);
        }
    }

    #[test]
    fn real_and_complex_bases_agree() {
        // Real basis on the eigenspace {±m}: cos and sin with norm √(2/vol).
        let (l1, l2, c) = (2.0 * PI, 3.0, 0.7);
        let vol = l1 * l2;
        let sigma = SigmaSpec::TorusLine { value: c, period: l1, sheet_period: l2 };
        let s = torus_series(&[l1, l2], &sigma, 12.0).unwrap();
        for j in 1..=5i64 {
            let k = 2.0 * PI * j as f64 / l2;
            let real = 2.0 * l1 * l1 / vol * ((k * c).cos().powi(2) + (k * c).sin().powi(2));
            let complex: f64 = s.entries.iter().filter(|e| (e.lambda - k).abs() < 1e-12).map(|e| e.weight).sum();
            assert!((real - complex).abs() < 1e-12);
        }
    }

    #[test]
    fn legendre_matches_direct_values() {
        let z = 0.37;
        let y = normalized_legendre(z, 6);
        let p = [
            1.0,
            z,
            0.5 * (3.0 * z * z - 1.0),
            0.5 * (5.0 * z.powi(3) - 3.0 * z),
            (35.0 * z.powi(4) - 30.0 * z * z + 3.0) / 8.0,
            (63.0 * z.powi(5) - 70.0 * z.powi(3) + 15.0 * z) / 8.0,
            (231.0 * z.powi(6) - 315.0 * z.powi(4) + 105.0 * z * z - 5.0) / 16.0,
        ];
        for (l, v) in y.iter().enumerate() {
            let want = ((2 * l + 1) as f64 / (4.0 * PI)).sqrt() * p[l];
            assert!((v - want).abs() < 1e-14);
        }
        let far = normalized_legendre(0.3, 10_000);
        assert!(far.iter().all(|v| v.is_finite() && v.abs() < 40.0));
    }

    #[test]
    fn equator_odd_weights_vanish() {
        let s = sphere_series(&SigmaSpec::PolarGreatCircle { u_max: 1.0 }, 400).unwrap();
        for l in (1..=400).step_by(2) {
            let lam = ((l * (l + 1)) as f64).sqrt();
            let w: f64 = s.entries.iter().filter(|e| e.lambda == lam).map(|e| e.weight).sum();
            assert!(w.abs() <= 1e-12);
        }
        assert_eq!(s.entries.len(), 401 * 401);
    }

    fn assoc_legendre(l: usize, m: usize, x: f64) -> f64 {
        let mut pmm = 1.0;
        let s = (1.0 - x * x).sqrt();
        for k in 0..m {
            pmm *= -((2 * k + 1) as f64) * s;
        }
        if l == m {
            return pmm;
        }
        let mut p1 = x * (2 * m + 1) as f64 * pmm;
        let mut p0 = pmm;
        for ll in m + 2..=l {
            let p2 = ((2 * ll - 1) as f64 * x * p1 - (ll + m - 1) as f64 * p0) / (ll - m) as f64;
            p0 = p1;
            p1 = p2;
        }
        p1
    }

    #[test]
    fn only_zonal_harmonics_contribute() {
        let u0 = 0.3;
        let s = sphere_series(&SigmaSpec::LatitudeCircle { u0, arc: 1.0 }, 20).unwrap();
        let q = 64;
        for l in 0..=20usize {
            let mut total = 0.0;
            for m in 0..=l {
                let fact: f64 = (l - m + 1..=l + m).map(|k| k as f64).product();
                let norm = ((2 * l + 1) as f64 / (4.0 * PI) / fact).sqrt();
                let radial = norm * assoc_legendre(l, m, u0.sin());
                let c = if m == 0 { 1.0 } else { 2f64.sqrt() };
                let mut ic = 0.0;
                let mut is = 0.0;
                for k in 0..q {
                    let phi = 2.0 * PI * k as f64 / q as f64;
                    let dl = 2.0 * PI * u0.cos() / q as f64;
                    ic += c * radial * (m as f64 * phi).cos() * dl;
                    is += c * radial * (m as f64 * phi).sin() * dl;
                }
                if m > 0 {
                    assert!(ic.abs() < 1e-12 && is.abs() < 1e-12);
                }
                total += ic * ic + is * is;
            }
            let lam = ((l * (l + 1)) as f64).sqrt();
            let w: f64 = s.entries.iter().filter(|e| e.lambda == lam).map(|e| e.weight).sum();
            assert!((total - w).abs() < 1e-10, "{l} {total} {w}");
        }
    }
}
