//! Flat-torus arithmetic: points, exact exponential/log maps, distances,
//! subspace frames and metric-aware angles.

use nalgebra::{DMatrix, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{PhError, PhResult};

/// Point of the flat torus `T^D`, coordinates normalized to `[0,1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint<const D: usize> {
    pub coords: SVector<f64, D>,
}

pub type Point3 = TorusPoint<3>;
pub type Vec3 = SVector<f64, 3>;
pub type Mat3 = SMatrix<f64, 3, 3>;

/// Reduce a real number to `[0,1)`.
#[inline]
pub fn wrap01(a: f64) -> f64 {
    let r = a - a.floor();
    // a tiny negative input can round up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Shortest signed representative of `a` modulo 1, in `(-1/2, 1/2]`.
#[inline]
pub fn wrap_signed(a: f64) -> f64 {
    let mut r = a - a.round();
    if r <= -0.5 {
        r += 1.0;
    }
    r
}

impl<const D: usize> TorusPoint<D> {
    pub fn new(coords: SVector<f64, D>) -> Self {
        Self { coords: coords.map(wrap01) }
    }

    pub fn from_slice(c: &[f64]) -> Self {
        Self::new(SVector::<f64, D>::from_iterator(c.iter().copied()))
    }

    pub fn origin() -> Self {
        Self { coords: SVector::zeros() }
    }

    /// Re-normalize; idempotent.
    pub fn normalized(&self) -> Self {
        Self::new(self.coords)
    }

    pub fn as_array(&self) -> Vec<f64> {
        self.coords.iter().copied().collect()
    }
}

impl Point3 {
    pub fn xyz(x: f64, y: f64, th: f64) -> Self {
        Self::new(Vec3::new(x, y, th))
    }
}

/// Tangent vector with its base point; components are in the flat chart.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentVector<const D: usize> {
    pub base: TorusPoint<D>,
    pub components: SVector<f64, D>,
}

impl<const D: usize> TangentVector<D> {
    pub fn new(base: TorusPoint<D>, components: SVector<f64, D>) -> Self {
        Self { base, components }
    }

    /// Norm in the ambient metric, or in `metric` (an SPD matrix) if given.
    pub fn norm(&self, metric: Option<&SMatrix<f64, D, D>>) -> f64 {
        metric_norm(&self.components, metric)
    }
}

pub fn metric_norm<const D: usize>(v: &SVector<f64, D>, metric: Option<&SMatrix<f64, D, D>>) -> f64 {
    match metric {
        None => v.norm(),
        Some(g) => v.dot(&(g * v)).max(0.0).sqrt(),
    }
}

/// `exp_x(v) = (x + v) mod 1`. Exact on the flat torus.
pub fn exp_map<const D: usize>(x: &TorusPoint<D>, v: &SVector<f64, D>) -> TorusPoint<D> {
    TorusPoint::new(x.coords + v)
}

/// Result of [`log_map`]; `ambiguous` flags a coordinate difference of exactly 1/2.
#[derive(Clone, Copy, Debug)]
pub struct LogResult<const D: usize> {
    pub v: SVector<f64, D>,
    pub ambiguous: bool,
}

/// Shortest representative of `y - x`; ties at 1/2 go to `+1/2` and are flagged.
pub fn log_map_checked<const D: usize>(x: &TorusPoint<D>, y: &TorusPoint<D>) -> LogResult<D> {
    let mut ambiguous = false;
    let v = (y.coords - x.coords).map(|d| {
        let r = wrap_signed(d);
        if (r - 0.5).abs() == 0.0 {
            ambiguous = true;
        }
        r
    });
    LogResult { v, ambiguous }
}

/// Like [`log_map_checked`] but returns `AmbiguousLog` on exact ties.
pub fn log_map_strict<const D: usize>(x: &TorusPoint<D>, y: &TorusPoint<D>) -> PhResult<SVector<f64, D>> {
    let r = log_map_checked(x, y);
    if r.ambiguous {
        Err(PhError::AmbiguousLog)
    } else {
        Ok(r.v)
    }
}

/// Shortest representative of `y - x` without tie reporting.
#[inline]
pub fn log_map<const D: usize>(x: &TorusPoint<D>, y: &TorusPoint<D>) -> SVector<f64, D> {
    (y.coords - x.coords).map(wrap_signed)
}

pub fn torus_distance<const D: usize>(x: &TorusPoint<D>, y: &TorusPoint<D>) -> f64 {
    log_map(x, y).norm()
}

/// Orthonormal (in the ambient metric) basis of a subspace at a base point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceFrame<const D: usize> {
    pub base: TorusPoint<D>,
    pub columns: Vec<SVector<f64, D>>,
}

impl<const D: usize> SubspaceFrame<D> {
    /// Orthonormalize `vectors` by modified Gram-Schmidt.
    pub fn from_vectors(base: TorusPoint<D>, vectors: &[SVector<f64, D>]) -> PhResult<Self> {
        let mut cols: Vec<SVector<f64, D>> = Vec::with_capacity(vectors.len());
        for v in vectors {
            let mut w = *v;
            for c in &cols {
                w -= c * c.dot(&w);
            }
            let n = w.norm();
            if n < 1e-13 * v.norm().max(1.0) {
                return Err(PhError::DegenerateFrame);
            }
            cols.push(w / n);
        }
        Ok(Self { base, columns: cols })
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        for (i, a) in self.columns.iter().enumerate() {
            for (j, b) in self.columns.iter().enumerate() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (a.dot(b) - target).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

/// Orthogonal projection of `u` onto `span(cols)` with respect to the metric `g`.
pub fn project_onto<const D: usize>(
    u: &SVector<f64, D>,
    cols: &[SVector<f64, D>],
    g: &SMatrix<f64, D, D>,
) -> SVector<f64, D> {
    let m = cols.len();
    if m == 0 {
        return SVector::zeros();
    }
    let gram = DMatrix::from_fn(m, m, |i, j| cols[i].dot(&(g * cols[j])));
    let rhs = nalgebra::DVector::from_fn(m, |i, _| cols[i].dot(&(g * u)));
    let coef = gram
        .lu()
        .solve(&rhs)
        .unwrap_or_else(|| nalgebra::DVector::zeros(m));
    let mut out = SVector::zeros();
    for (i, c) in cols.iter().enumerate() {
        out += c * coef[i];
    }
    out
}

/// `d(v/|v|, E)`: norm of the component of the unit vector orthogonal to `E`,
/// both measured in `metric` (ambient if `None`).
pub fn angle_to_subspace<const D: usize>(
    v: &SVector<f64, D>,
    e: &SubspaceFrame<D>,
    metric: Option<&SMatrix<f64, D, D>>,
) -> PhResult<f64> {
    angle_to_span(v, &e.columns, metric)
}

/// Same as [`angle_to_subspace`] with a bare list of spanning vectors.
pub fn angle_to_span<const D: usize>(
    v: &SVector<f64, D>,
    cols: &[SVector<f64, D>],
    metric: Option<&SMatrix<f64, D, D>>,
) -> PhResult<f64> {
    let g = metric.copied().unwrap_or_else(SMatrix::identity);
    let n = metric_norm(v, Some(&g));
    if !(n > 0.0) {
        return Err(PhError::ZeroVector);
    }
    let u = v / n;
    let p = project_onto(&u, cols, &g);
    Ok(metric_norm(&(u - p), Some(&g)).min(2.0))
}

/// Operator norm of `m` as a map `(R^D, g) -> (R^D, g)`.
pub fn metric_operator_norm<const D: usize>(m: &SMatrix<f64, D, D>, g: &SMatrix<f64, D, D>) -> f64
where
    nalgebra::Const<D>: nalgebra::DimMin<nalgebra::Const<D>, Output = nalgebra::Const<D>>,
{
    let dm = DMatrix::from_fn(D, D, |i, j| m[(i, j)]);
    let dg = DMatrix::from_fn(D, D, |i, j| g[(i, j)]);
    let chol = match dg.cholesky() {
        Some(c) => c,
        None => return f64::NAN,
    };
    // g = L L^T, so |v|_g = |L^T v| and the operator norm is |L^T M L^{-T}|_2
    let l = chol.l();
    let lt = l.transpose();
    let lt_inv = match lt.clone().try_inverse() {
        Some(x) => x,
        None => return f64::NAN,
    };
    let a = &lt * dm * lt_inv;
    a.singular_values().max()
}

/// Cubic (4-point Lagrange) interpolation on a uniform grid, linear extrapolation
/// past the ends.
pub fn cubic_uniform(values: &[f64], x0: f64, h: f64, x: f64) -> f64 {
    let n = values.len();
    debug_assert!(n >= 4);
    let s = (x - x0) / h;
    if s <= 0.0 {
        let d = values[1] - values[0];
        return values[0] + d * s;
    }
    let last = (n - 1) as f64;
    if s >= last {
        let d = values[n - 1] - values[n - 2];
        return values[n - 1] + d * (s - last);
    }
    let i = (s.floor() as usize).clamp(1, n - 3);
    let t = s - i as f64;
    let (p0, p1, p2, p3) = (values[i - 1], values[i], values[i + 1], values[i + 2]);
    // Lagrange basis at nodes -1, 0, 1, 2
    let l0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
    let l1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
    let l2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
    let l3 = (t + 1.0) * t * (t - 1.0) / 6.0;
    p0 * l0 + p1 * l1 + p2 * l2 + p3 * l3
}

/// Derivative of [`cubic_uniform`] with respect to `x`.
pub fn cubic_uniform_deriv(values: &[f64], x0: f64, h: f64, x: f64) -> f64 {
    let n = values.len();
    let s = (x - x0) / h;
    if s <= 0.0 {
        return (values[1] - values[0]) / h;
    }
    let last = (n - 1) as f64;
    if s >= last {
        return (values[n - 1] - values[n - 2]) / h;
    }
    let i = (s.floor() as usize).clamp(1, n - 3);
    let t = s - i as f64;
    let (p0, p1, p2, p3) = (values[i - 1], values[i], values[i + 1], values[i + 2]);
    let d0 = -(3.0 * t * t - 6.0 * t + 2.0) / 6.0;
    let d1 = (3.0 * t * t - 4.0 * t - 1.0) / 2.0;
    let d2 = -(3.0 * t * t - 2.0 * t - 2.0) / 2.0;
    let d3 = (3.0 * t * t - 1.0) / 6.0;
    (p0 * d0 + p1 * d1 + p2 * d2 + p3 * d3) / h
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exp_examples() {
        let o = Point3::origin();
        assert_eq!(exp_map(&o, &Vec3::zeros()), o);
        let x = Point3::xyz(0.9, 0.2, 0.5);
        let y = exp_map(&x, &Vec3::new(0.2, 0.0, 0.0));
        assert_abs_diff_eq!(y.coords, Vec3::new(0.1, 0.2, 0.5), epsilon = 1e-15);
        let x = Point3::xyz(0.25, 0.75, 0.1);
        let y = exp_map(&x, &Vec3::new(-0.5, 0.5, 0.05));
        assert_abs_diff_eq!(y.coords, Vec3::new(0.75, 0.25, 0.15), epsilon = 1e-15);
    }

    #[test]
    fn log_examples() {
        let x = Point3::xyz(0.3, 0.1, 0.7);
        assert_eq!(log_map(&x, &x), Vec3::zeros());
        let a = Point3::xyz(0.9, 0.0, 0.0);
        let b = Point3::xyz(0.1, 0.0, 0.0);
        assert_abs_diff_eq!(log_map(&a, &b), Vec3::new(0.2, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn log_tie_flagged() {
        let a = Point3::xyz(0.0, 0.0, 0.0);
        let b = Point3::xyz(0.5, 0.0, 0.0);
        let r = log_map_checked(&a, &b);
        assert!(r.ambiguous);
        assert_eq!(r.v[0], 0.5);
        assert!(matches!(log_map_strict(&a, &b), Err(PhError::AmbiguousLog)));
    }

    #[test]
    fn distance_wraps() {
        let a = Point3::xyz(0.95, 0.0, 0.0);
        let b = Point3::xyz(0.05, 0.0, 0.0);
        assert_abs_diff_eq!(torus_distance(&a, &b), 0.1, epsilon = 1e-15);
        assert_eq!(torus_distance(&a, &a), 0.0);
    }

    #[test]
    fn normalization_idempotent() {
        let p = Point3::new(Vec3::new(-0.25, 3.5, 1e-18 - 1.0));
        assert_eq!(p.normalized(), p);
        assert!(p.coords.iter().all(|c| (0.0..1.0).contains(c)));
    }

    #[test]
    fn angle_basic_cases() {
        let o = Point3::origin();
        let e = SubspaceFrame::from_vectors(o, &[Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_abs_diff_eq!(angle_to_subspace(&Vec3::new(2.0, 0.0, 0.0), &e, None).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(angle_to_subspace(&Vec3::new(0.0, 0.0, 3.0), &e, None).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(angle_to_subspace(&Vec3::zeros(), &e, None), Err(PhError::ZeroVector)));
    }

    #[test]
    fn angle_in_metric() {
        // metric in which (1,0,0) and (1,1,0) are orthogonal
        let b = Mat3::from_columns(&[Vec3::new(1.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)]);
        let bi = b.try_inverse().unwrap();
        let g = bi.transpose() * bi;
        let e = [Vec3::new(1.0, 0.0, 0.0)];
        let a = angle_to_span(&Vec3::new(1.0, 1.0, 0.0), &e, Some(&g)).unwrap();
        assert_abs_diff_eq!(a, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn metric_norm_of_identity() {
        let g = Mat3::new(2.0, 0.3, 0.0, 0.3, 1.0, 0.1, 0.0, 0.1, 3.0);
        assert_abs_diff_eq!(metric_operator_norm(&Mat3::identity(), &g), 1.0, epsilon = 1e-12);
        let m = Mat3::from_diagonal(&Vec3::new(2.0, 0.5, 1.0));
        assert_abs_diff_eq!(metric_operator_norm(&m, &Mat3::identity()), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn cubic_exact_for_cubics() {
        let h = 0.1;
        let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x - 3.0 * x * x * x;
        let vals: Vec<f64> = (0..20).map(|i| f(-1.0 + h * i as f64)).collect();
        for &x in &[-0.95, -0.5, 0.013, 0.77] {
            assert_abs_diff_eq!(cubic_uniform(&vals, -1.0, h, x), f(x), epsilon = 1e-12);
            let df = -2.0 + x - 9.0 * x * x;
            assert_abs_diff_eq!(cubic_uniform_deriv(&vals, -1.0, h, x), df, epsilon = 1e-10);
        }
    }
}
