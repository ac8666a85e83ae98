use std::f64::consts::PI;
use std::fmt::Debug;

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::charts::{wrap_delta, MetricChart};
use crate::linalg::null_space;

/// Closed embedded submanifold given by a parametrization in chart coordinates.
pub trait Submanifold: Send + Sync + Debug {
    fn ambient_dim(&self) -> usize;

    /// Dimension k of Σ.
    fn dim(&self) -> usize;

    fn codim(&self) -> usize {
        self.ambient_dim() - self.dim()
    }

    fn embed(&self, sigma: &[f64]) -> Vec<f64>;

    /// `n × k` matrix dι.
    fn tangent_frame(&self, sigma: &[f64]) -> DMatrix<f64>;

    fn param_periods(&self) -> Vec<Option<f64>>;

    /// Parameter box scanned by return searches.
    fn grid_bounds(&self) -> Vec<(f64, f64)>;

    /// Nearest parameter and a signed distance-like function vanishing exactly
    /// on Σ (codimension 1 only); `None` if unsupported.
    fn locate(&self, chart: &MetricChart, x: &[f64]) -> Option<(Vec<f64>, f64)>;

    /// Metric-independent annihilator basis (`n × codim`), smooth in σ.
    fn annihilator(&self, sigma: &[f64]) -> DMatrix<f64> {
        let t = self.tangent_frame(sigma);
        let n = self.ambient_dim();
        if self.dim() == 0 {
            return DMatrix::identity(n, n);
        }
        let ns = null_space(&t.transpose(), 1e-10 * t.norm().max(1.0));
        if ns.ncols() == 1 {
            // orient so that det[T | ν] > 0
            let mut m = t.clone().insert_column(t.ncols(), 0.0);
            m.set_column(t.ncols(), &ns.column(0));
            if m.determinant() < 0.0 {
                return -ns;
            }
        }
        ns
    }
}

/// `{x_axis ≡ value (mod sheet_period)}`, parametrized by the remaining coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordinateSlice {
    pub n: usize,
    pub axis: usize,
    pub value: f64,
    #[serde(default)]
    pub sheet_period: Option<f64>,
    /// Periods of the parameters (the remaining coordinates, in order).
    #[serde(default)]
    pub param_periods: Vec<Option<f64>>,
    pub bounds: Vec<(f64, f64)>,
}

impl CoordinateSlice {
    /// `{x₂ = value}` on a 2-torus with the given period in `x₁`.
    pub fn torus_horizontal(value: f64, period: f64, sheet_period: f64) -> Self {
        Self {
            n: 2,
            axis: 1,
            value,
            sheet_period: Some(sheet_period),
            param_periods: vec![Some(period)],
            bounds: vec![(0.0, period)],
        }
    }

    fn lift_params(&self, sigma: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.n);
        let mut it = sigma.iter();
        for i in 0..self.n {
            if i == self.axis {
                x.push(self.value);
            } else {
                x.push(*it.next().expect("parameter count"));
            }
        }
        x
    }
}

impl Submanifold for CoordinateSlice {
    fn ambient_dim(&self) -> usize {
        self.n
    }
    fn dim(&self) -> usize {
        self.n - 1
    }
    fn embed(&self, sigma: &[f64]) -> Vec<f64> {
        self.lift_params(sigma)
    }
    fn tangent_frame(&self, _sigma: &[f64]) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.n, self.n - 1);
        let mut c = 0;
        for i in 0..self.n {
            if i != self.axis {
                t[(i, c)] = 1.0;
                c += 1;
            }
        }
        t
    }
    fn param_periods(&self) -> Vec<Option<f64>> {
        if self.param_periods.is_empty() {
            vec![None; self.n - 1]
        } else {
            self.param_periods.clone()
        }
    }
    fn grid_bounds(&self) -> Vec<(f64, f64)> {
        self.bounds.clone()
    }
    fn locate(&self, _chart: &MetricChart, x: &[f64]) -> Option<(Vec<f64>, f64)> {
        let d = x[self.axis] - self.value;
        let d = match self.sheet_period {
            Some(p) => wrap_delta(d, p),
            None => d,
        };
        let periods = self.param_periods();
        let sigma = (0..self.n)
            .filter(|&i| i != self.axis)
            .zip(periods)
            .map(|(i, p)| match p {
                Some(p) => x[i].rem_euclid(p),
                None => x[i],
            })
            .collect();
        Some((sigma, d))
    }
}

/// Circle of angular radius `radius` about `center = (φ, u)` on the round
/// sphere chart, parametrized by bearing θ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmallCircle {
    pub center: [f64; 2],
    pub radius: f64,
    pub bounds: (f64, f64),
}

fn to_cart(p: &[f64]) -> Vector3<f64> {
    let (sp, cp) = p[0].sin_cos();
    let (su, cu) = p[1].sin_cos();
    Vector3::new(cu * cp, cu * sp, su)
}

fn to_chart(v: &Vector3<f64>) -> [f64; 2] {
    [v.y.atan2(v.x), v.z.clamp(-1.0, 1.0).asin()]
}

impl SmallCircle {
    fn basis(&self) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
        let c = to_cart(&self.center);
        let (sp, cp) = self.center[0].sin_cos();
        let (su, cu) = self.center[1].sin_cos();
        let east = Vector3::new(-sp, cp, 0.0);
        let north = Vector3::new(-su * cp, -su * sp, cu);
        (c, east, north)
    }

    fn point3(&self, theta: f64) -> (Vector3<f64>, Vector3<f64>) {
        let (c, e, nn) = self.basis();
        let (st, ct) = theta.sin_cos();
        let (sr, cr) = self.radius.sin_cos();
        let p = c * cr + (e * ct + nn * st) * sr;
        let dp = (-e * st + nn * ct) * sr;
        (p, dp)
    }
}

impl Submanifold for SmallCircle {
    fn ambient_dim(&self) -> usize {
        2
    }
    fn dim(&self) -> usize {
        1
    }
    fn embed(&self, sigma: &[f64]) -> Vec<f64> {
        to_chart(&self.point3(sigma[0]).0).to_vec()
    }
    fn tangent_frame(&self, sigma: &[f64]) -> DMatrix<f64> {
        let (p, dp) = self.point3(sigma[0]);
        let rho2 = p.x * p.x + p.y * p.y;
        let dphi = (p.x * dp.y - p.y * dp.x) / rho2;
        let du = dp.z / rho2.sqrt();
        DMatrix::from_column_slice(2, 1, &[dphi, du])
    }
    fn param_periods(&self) -> Vec<Option<f64>> {
        vec![Some(2.0 * PI)]
    }
    fn grid_bounds(&self) -> Vec<(f64, f64)> {
        vec![self.bounds]
    }
    fn locate(&self, _chart: &MetricChart, x: &[f64]) -> Option<(Vec<f64>, f64)> {
        let (c, e, nn) = self.basis();
        let p = to_cart(x);
        let ang = p.dot(&c).clamp(-1.0, 1.0).acos();
        let theta = p.dot(&nn).atan2(p.dot(&e)).rem_euclid(2.0 * PI);
        Some((vec![theta], ang - self.radius))
    }
}

/// A single point (codimension n).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PointSet {
    pub x: Vec<f64>,
}

impl Submanifold for PointSet {
    fn ambient_dim(&self) -> usize {
        self.x.len()
    }
    fn dim(&self) -> usize {
        0
    }
    fn embed(&self, _sigma: &[f64]) -> Vec<f64> {
        self.x.clone()
    }
    fn tangent_frame(&self, _sigma: &[f64]) -> DMatrix<f64> {
        DMatrix::zeros(self.x.len(), 0)
    }
    fn param_periods(&self) -> Vec<Option<f64>> {
        Vec::new()
    }
    fn grid_bounds(&self) -> Vec<(f64, f64)> {
        Vec::new()
    }
    fn locate(&self, _chart: &MetricChart, _x: &[f64]) -> Option<(Vec<f64>, f64)> {
        None
    }
}

/// Config form of Σ.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaSpec {
    /// Horizontal closed geodesic `{x₂ ≡ value mod sheet_period}` of a flat or bumped 2-torus.
    TorusLine {
        value: f64,
        period: f64,
        sheet_period: f64,
    },
    /// Great circle through the poles `{φ ≡ 0 mod π}`, an isometric copy of the
    /// equator whose normal geodesics avoid the polar caps.
    PolarGreatCircle { u_max: f64 },
    /// Latitude circle `u = u0` realized isometrically as a small circle about
    /// an equatorial center, scanned on a cap-avoiding arc.
    LatitudeCircle { u0: f64, arc: f64 },
    /// Longitudinal segment `{φ = φ0}` of a sphere-family chart.
    Meridian { phi0: f64, period: f64, u_max: f64 },
    Point { x: Vec<f64> },
}

impl SigmaSpec {
    pub fn build(&self) -> std::sync::Arc<dyn Submanifold> {
        use std::sync::Arc;
        match self {
            SigmaSpec::TorusLine { value, period, sheet_period } => {
                Arc::new(CoordinateSlice::torus_horizontal(*value, *period, *sheet_period))
            }
            SigmaSpec::PolarGreatCircle { u_max } => Arc::new(CoordinateSlice {
                n: 2,
                axis: 0,
                value: 0.0,
                sheet_period: Some(PI),
                param_periods: vec![None],
                bounds: vec![(-u_max, *u_max)],
            }),
            SigmaSpec::LatitudeCircle { u0, arc } => Arc::new(SmallCircle {
                center: [PI / 2.0, 0.0],
                radius: PI / 2.0 - u0,
                bounds: (-arc, *arc),
            }),
            SigmaSpec::Meridian { phi0, period, u_max } => Arc::new(CoordinateSlice {
                n: 2,
                axis: 0,
                value: *phi0,
                sheet_period: Some(*period),
                param_periods: vec![None],
                bounds: vec![(-u_max, *u_max)],
            }),
            SigmaSpec::Point { x } => Arc::new(PointSet { x: x.clone() }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charts::{make_model, ModelName, ModelParams};

    fn fd_frame(s: &dyn Submanifold, sigma: f64) -> Vec<f64> {
        let h = 1e-6;
        let a = s.embed(&[sigma + h]);
        let b = s.embed(&[sigma - h]);
        a.iter().zip(&b).map(|(p, q)| (p - q) / (2.0 * h)).collect()
    }

    #[test]
    fn small_circle_frame_matches_differences() {
        let c = SmallCircle { center: [PI / 2.0, 0.0], radius: 1.2, bounds: (-1.0, 1.0) };
        for th in [-0.9, 0.0, 0.4, 2.5] {
            let t = c.tangent_frame(&[th]);
            let fd = fd_frame(&c, th);
            assert!((t[(0, 0)] - fd[0]).abs() < 1e-6 && (t[(1, 0)] - fd[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn small_circle_locate_inverts_embed() {
        let chart = make_model(ModelName::RoundSphere, &ModelParams::default()).unwrap().chart;
        let c = SmallCircle { center: [PI / 2.0, 0.0], radius: 1.2, bounds: (-1.0, 1.0) };
        let (s, d) = c.locate(&chart, &c.embed(&[0.7])).unwrap();
        assert!((s[0] - 0.7).abs() < 1e-12 && d.abs() < 1e-12);
    }

    #[test]
    fn latitude_circle_top_point_stays_below_caps() {
        let circle = SmallCircle { center: [PI / 2.0, 0.0], radius: PI / 2.0 - 0.3, bounds: (-1.0, 1.0) };
        let x = circle.embed(&[PI / 2.0]);
        assert!((x[1] - (PI / 2.0 - 0.3)).abs() < 1e-12);
        assert!(x[1] < PI / 2.0 - 0.1);
    }

    #[test]
    fn annihilator_orientation() {
        let s = CoordinateSlice::torus_horizontal(0.0, 2.0 * PI, 2.0 * PI);
        let a = s.annihilator(&[1.0]);
        assert_eq!(a.ncols(), 1);
        assert!((a[(1, 0)] - 1.0).abs() < 1e-14 && a[(0, 0)].abs() < 1e-14);
    }
}
