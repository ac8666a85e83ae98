use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::KuznecovSeries;
use crate::error::{LabError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct LeadingFit {
    pub codim: usize,
    pub c_fit: f64,
    pub exponent_fit: f64,
    /// Constant term of the linear fit of `N` against `λ^codim`.
    pub intercept: f64,
    /// Range of the exponent fit (upper half of the grid).
    pub fit_range: (f64, f64),
    pub lambda_grid: Vec<f64>,
    /// `(N(λ) − C λ^codim) / λ^{codim−1}` on `lambda_grid`.
    pub residual: Vec<f64>,
    pub max_abs_residual: f64,
    /// Residual of the triangle-smoothed count (half-width one grid step),
    /// free of aliasing from the jumps; input of the spectrum.
    pub residual_smoothed: Vec<f64>,
}

impl LeadingFit {
    /// Columns: `lambda,count,residual,residual_smoothed`.
    pub fn residual_csv(&self, series: &KuznecovSeries) -> String {
        let mut out = String::from("lambda,count,residual,residual_smoothed\n");
        for ((l, r), s) in self.lambda_grid.iter().zip(&self.residual).zip(&self.residual_smoothed) {
            out.push_str(&format!("{:.15e},{:.15e},{:.15e},{:.15e}\n", l, series.count(*l), r, s));
        }
        out
    }
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Fits `N(λ) ≈ C λ^codim + c` on a uniform grid of `points` values over
/// `[lambda_min, λ_max]`; the exponent is fitted on the upper half.
pub fn fit_leading(series: &KuznecovSeries, lambda_min: f64, points: usize) -> Result<LeadingFit> {
    let hi = series.lambda_max;
    if hi < 50.0 {
        return Err(LabError::InvalidParams(format!("fit needs λ_max ≥ 50, got {hi}")));
    }
    if !(series.total_weight() > 0.0) {
        return Err(LabError::InvalidParams("degenerate fit: all weights vanish".into()));
    }
    if points < 16 || !(lambda_min > 0.0 && lambda_min < hi / 2.0) {
        return Err(LabError::InvalidParams("fit grid too small".into()));
    }
    let step = (hi - lambda_min) / (points - 1) as f64;
    let grid: Vec<f64> = (0..points).map(|k| lambda_min + step * k as f64).collect();
    let counts: Vec<f64> = grid.iter().map(|&l| series.count(l)).collect();
    let upper: Vec<usize> = (0..points).filter(|&k| grid[k] >= hi / 2.0 && counts[k] > 0.0).collect();
    let lx: Vec<f64> = upper.iter().map(|&k| grid[k].ln()).collect();
    let ly: Vec<f64> = upper.iter().map(|&k| counts[k].ln()).collect();
    let (exponent_fit, _) = linear_fit(&lx, &ly);
    let d = series.codim as i32;
    let px: Vec<f64> = grid.iter().map(|l| l.powi(d)).collect();
    let (c_fit, intercept) = linear_fit(&px, &counts);
    let residual: Vec<f64> =
        grid.iter().zip(&counts).map(|(l, n)| (n - c_fit * l.powi(d)) / l.powi(d - 1)).collect();
    let max_abs_residual = residual.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    let residual_smoothed = grid
        .iter()
        .map(|&l| (series.smoothed_count(l, step) - c_fit * l.powi(d)) / l.powi(d - 1))
        .collect();
    Ok(LeadingFit {
        codim: series.codim,
        c_fit,
        exponent_fit,
        intercept,
        fit_range: (hi / 2.0, hi),
        lambda_grid: grid,
        residual,
        max_abs_residual,
        residual_smoothed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumOptions {
    /// Zero-padding factor of the transform.
    pub pad: usize,
    /// Peaks must reach this multiple of the median magnitude.
    pub floor_factor: f64,
    /// Peaks must also reach this fraction of the tallest peak.
    pub rel_floor: f64,
    pub separation: f64,
    /// Frequencies below this (the mean and drift) are ignored.
    pub t_min: f64,
    pub t_max: Option<f64>,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        Self { pad: 4, floor_factor: 5.0, rel_floor: 1e-3, separation: 0.5, t_min: 0.5, t_max: None }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Peak {
    /// Frequency in the variable conjugate to λ (a return time).
    pub t: f64,
    /// Sine-amplitude estimate, window-normalized.
    pub amplitude: f64,
}

/// Frequency resolution `2π / (λ range)` of a grid.
pub fn frequency_resolution(grid: &[f64]) -> f64 {
    2.0 * std::f64::consts::PI / (grid[grid.len() - 1] - grid[0])
}

/// Hann-windowed DFT of `r` on a uniform λ grid and its peaks above the
/// median floor, at least `separation` apart.
pub fn oscillation_spectrum(grid: &[f64], r: &[f64], opts: &SpectrumOptions) -> Result<Vec<Peak>> {
    let n = grid.len();
    if n < 1 << 12 || r.len() != n {
        return Err(LabError::InvalidParams(format!("spectrum needs a grid of at least 4096 points, got {n}")));
    }
    let dl = (grid[n - 1] - grid[0]) / (n - 1) as f64;
    if grid.windows(2).any(|w| ((w[1] - w[0]) - dl).abs() > 1e-9 * dl.abs().max(1.0)) || !(dl > 0.0) {
        return Err(LabError::InvalidParams("spectrum grid must be uniform and increasing".into()));
    }
    let mean = r.iter().sum::<f64>() / n as f64;
    let window: Vec<f64> =
        (0..n).map(|k| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())).collect();
    let wsum: f64 = window.iter().sum();
    let m = n * opts.pad.max(1);
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); m];
    for k in 0..n {
        buf[k] = Complex::new((r[k] - mean) * window[k], 0.0);
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let half = m / 2;
    let amp: Vec<f64> = buf[..=half].iter().map(|c| 2.0 * c.norm() / wsum).collect();
    let freq = |j: usize| 2.0 * std::f64::consts::PI * j as f64 / (m as f64 * dl);
    let mut sorted: Vec<f64> = amp[1..].to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let t_lo = (opts.t_min * m as f64 * dl / (2.0 * std::f64::consts::PI)).ceil() as usize;
    let peak_level = amp[t_lo.min(half)..].iter().fold(0.0_f64, |a, v| a.max(*v));
    let floor = (opts.floor_factor * median).max(opts.rel_floor * peak_level).max(f64::MIN_POSITIVE);
    let mut cands: Vec<Peak> = (1..half)
        .filter(|&j| amp[j] >= amp[j - 1] && amp[j] >= amp[j + 1] && amp[j] > floor)
        .map(|j| Peak { t: freq(j), amplitude: amp[j] })
        .filter(|p| p.t >= opts.t_min && opts.t_max.is_none_or(|t| p.t <= t))
        .collect();
    cands.sort_by(|a, b| b.amplitude.total_cmp(&a.amplitude));
    let mut peaks: Vec<Peak> = Vec::new();
    for c in cands {
        if peaks.iter().all(|p| (p.t - c.t).abs() >= opts.separation) {
            peaks.push(c);
        }
    }
    peaks.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(peaks)
}

/// `max_j w_j / λ_j^{codim−1}` over entries with `λ_j ≥ 1`.
pub fn individual_bound_check(series: &KuznecovSeries) -> f64 {
    let d = series.codim as i32 - 1;
    series
        .entries
        .iter()
        .filter(|e| e.lambda >= 1.0)
        .map(|e| e.weight / e.lambda.powi(d))
        .fold(0.0, f64::max)
}
