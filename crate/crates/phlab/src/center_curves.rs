//! Near returns, center connections, periodic center families and the
//! induced one-dimensional dynamics along them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PhError, PhResult};
use crate::geometry::{cubic_uniform, exp_map, log_map, torus_distance, Point3, Vec3};
use crate::invariant_manifolds::{center_curve_integrate, center_curve_window, CenterCurve};
use crate::splitting::{center_direction, center_orientation_transport};
use crate::systems::SystemInstance;

/// Bound on `|sigma| / eps_return` for a connecting center segment.
pub const SEGMENT_CONSTANT: f64 = 4.0;
pub const DEFAULT_STARTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NearReturn {
    pub y: Point3,
    pub k: usize,
    /// `d(y, f^k(y))`.
    pub eps_return: f64,
    pub target: Point3,
    /// `d(x, y)`.
    pub eps_target: f64,
    /// Signed offset `c` with `f^k(y) = y + c e^c(y)` to first order.
    pub center_offset: f64,
}

/// Newton solve of `f^k(y) - y = c e^c(y)` in the unknowns `(y, c)` with
/// minimum-norm steps.
fn slack_newton(f: &SystemInstance, y0: &Point3, k: usize) -> Option<(Point3, f64)> {
    let mut y = *y0;
    let mut c = 0.0;
    for _ in 0..30 {
        let ec = center_direction(f, &y).ok()?;
        let r = log_map(&y, &f.iterate(&y, k)) - ec * c;
        if r.norm() < 1e-14 {
            return Some((y, c));
        }
        let j = f.jacobian_iter(&y, k) - crate::geometry::Mat3::identity();
        let jm = nalgebra::SMatrix::<f64, 3, 4>::from_columns(&[j.column(0).into(), j.column(1).into(), j.column(2).into(), -ec]);
        let jjt = jm * jm.transpose();
        let lam = jjt.lu().solve(&r)?;
        let step = jm.transpose() * lam;
        y = Point3::new(y.coords - step.fixed_rows::<3>(0));
        c -= step[3];
        if !c.is_finite() {
            return None;
        }
    }
    let ec = center_direction(f, &y).ok()?;
    let r = log_map(&y, &f.iterate(&y, k)) - ec * c;
    (r.norm() < 1e-11).then_some((y, c))
}

/// All distinct near-return candidates of period `k` reached from a seeded
/// jittered grid of starts inside the cube of half-width `radius` around `x`.
/// Candidates are deduplicated along center leaves; results lie within
/// `radius` of `x`.
pub fn scan_returns(
    f: &SystemInstance,
    x: &Point3,
    k: usize,
    radius: f64,
    starts: usize,
    seed: u64,
) -> Vec<NearReturn> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let side = (starts as f64).cbrt().round().max(1.0) as usize;
    let cell = 2.0 * radius / side as f64;
    let mut found: Vec<NearReturn> = Vec::new();
    if torus_distance(x, &f.iterate(x, k)) < 1e-12 {
        return vec![NearReturn { y: *x, k, eps_return: 0.0, target: *x, eps_target: 0.0, center_offset: 0.0 }];
    }
    for i in 0..side {
        for j in 0..side {
            for l in 0..side {
                let jit = Vec3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
                let off = Vec3::new(i as f64, j as f64, l as f64) + jit;
                let y0 = exp_map(x, &(off * cell - Vec3::repeat(radius)));
                let Some((y, c)) = slack_newton(f, &y0, k) else { continue };
                let d = torus_distance(x, &y);
                if d > radius {
                    continue;
                }
                let ec = center_direction(f, &y).unwrap_or_else(|_| Vec3::z());
                // transverse offset to existing candidates
                let dup = found.iter_mut().find(|nr| {
                    let v = log_map(&nr.y, &y);
                    (v - ec * v.dot(&ec)).norm() < 1e-8
                });
                let cand = NearReturn {
                    y,
                    k,
                    eps_return: torus_distance(&y, &f.iterate(&y, k)),
                    target: *x,
                    eps_target: d,
                    center_offset: c,
                };
                match dup {
                    Some(nr) => {
                        if d < nr.eps_target {
                            *nr = cand;
                        }
                    }
                    None => found.push(cand),
                }
            }
        }
    }
    found.sort_by(|a, b| a.eps_target.partial_cmp(&b.eps_target).unwrap());
    found
}

/// Smallest `k <= k_max` with a point `y` such that `d(y,x) < eps` and
/// `d(f^k y, x) < eps`; ties broken by the smallest `eps_return`.
pub fn find_near_return(f: &SystemInstance, x: &Point3, k_max: usize, eps: f64, seed: u64) -> PhResult<NearReturn> {
    for k in 1..=k_max {
        let best = scan_returns(f, x, k, eps, DEFAULT_STARTS, seed)
            .into_iter()
            .filter(|nr| nr.eps_target < eps && torus_distance(&f.iterate(&nr.y, k), x) < eps)
            .min_by(|a, b| a.eps_return.partial_cmp(&b.eps_return).unwrap());
        if let Some(nr) = best {
            return Ok(nr);
        }
    }
    Err(PhError::NoReturnFound)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterSegment {
    pub start: Point3,
    pub end: Point3,
    pub k: usize,
    /// Signed parameter of `end` along the center curve through `start`.
    pub t: f64,
    pub curve: CenterCurve,
    pub tangency_defect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Connection {
    PeriodicPoint { p: Point3, k: usize },
    Segment(CenterSegment),
}

fn center_flow(f: &SystemInstance, y: &Point3, t: f64) -> PhResult<Point3> {
    if t == 0.0 {
        return Ok(*y);
    }
    let steps = ((t.abs() / 0.01).ceil() as usize).max(4);
    let c = center_curve_integrate(f, y, t.abs(), if t > 0.0 { 1 } else { -1 }, steps)?;
    Ok(c.end())
}

/// Refines the near return to a point `w` with `f^k(w)` on the center curve
/// of `w`, and extracts the connecting segment.
pub fn center_connection(f: &SystemInstance, nr: &NearReturn) -> PhResult<Connection> {
    if nr.eps_return < 1e-12 {
        return Ok(Connection::PeriodicPoint { p: nr.y, k: nr.k });
    }
    let k = nr.k;
    let mut y = nr.y;
    let mut t = nr.center_offset;
    let resid = |y: &Point3, t: f64| -> PhResult<Vec3> { Ok(log_map(&center_flow(f, y, t)?, &f.iterate(y, k))) };
    let mut r = resid(&y, t)?;
    for _ in 0..20 {
        if r.norm() < 1e-13 {
            break;
        }
        let e = 1e-7;
        let mut jm = nalgebra::SMatrix::<f64, 3, 4>::zeros();
        for c in 0..3 {
            let mut d = Vec3::zeros();
            d[c] = e;
            let rp = resid(&exp_map(&y, &d), t)?;
            let rm = resid(&exp_map(&y, &-d), t)?;
            jm.set_column(c, &((rp - rm) / (2.0 * e)));
        }
        jm.set_column(3, &((resid(&y, t + e)? - resid(&y, t - e)?) / (2.0 * e)));
        let lam = (jm * jm.transpose()).lu().solve(&r).ok_or(PhError::HolonomyFixedPointNotFound)?;
        let step = jm.transpose() * lam;
        y = Point3::new(y.coords - step.fixed_rows::<3>(0));
        t -= step[3];
        r = resid(&y, t)?;
    }
    if r.norm() > 1e-11 {
        return Err(PhError::HolonomyFixedPointNotFound);
    }
    if t.abs() < 1e-12 {
        return Ok(Connection::PeriodicPoint { p: y, k });
    }
    if t.abs() > SEGMENT_CONSTANT * nr.eps_return.max(1e-300) {
        return Err(PhError::SegmentTooLong(t.abs()));
    }
    let steps = ((t.abs() / 0.005).ceil() as usize).max(4);
    let curve = center_curve_integrate(f, &y, t.abs(), if t > 0.0 { 1 } else { -1 }, steps)?;
    let tangency_defect = curve.tangency_defect(f)?;
    if tangency_defect > 1e-4 {
        return Err(PhError::SegmentTooLong(t.abs()));
    }
    Ok(Connection::Segment(CenterSegment { start: y, end: f.iterate(&y, k), k, t, curve, tangency_defect }))
}

/// Cumulative `int_0^t ||Df|E^c||` along one leg, sampled on the leg grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducedMap {
    pub leg: usize,
    pub x0: f64,
    pub h: f64,
    /// Integral values on the leg grid.
    pub values: Vec<f64>,
    /// `||Df|E^c||` on the leg grid.
    pub rate: Vec<f64>,
    pub offset: f64,
    /// `(period of this leg, period of the image leg)` for closed legs.
    pub periods: Option<(f64, f64)>,
}

impl InducedMap {
    pub fn eval(&self, t: f64) -> f64 {
        let (tr, m) = match self.periods {
            Some((l, _)) => {
                let m = ((t + 0.5 * l) / l).floor();
                (t - m * l, m)
            }
            None => (t, 0.0),
        };
        let img = self.periods.map(|(_, l2)| l2 * m).unwrap_or(0.0);
        self.offset + cubic_uniform(&self.values, self.x0, self.h, tr) + img
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let (tr, _) = match self.periods {
            Some((l, _)) => {
                let m = ((t + 0.5 * l) / l).floor();
                (t - m * l, m)
            }
            None => (t, 0.0),
        };
        cubic_uniform(&self.rate, self.x0, self.h, tr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicCenterFamily {
    pub curves: Vec<CenterCurve>,
    pub t0: f64,
    pub k: usize,
    pub window: f64,
    pub commutation_residual: f64,
    pub induced: Vec<InducedMap>,
}

impl PeriodicCenterFamily {
    pub fn point(&self, leg: usize, t: f64) -> Point3 {
        self.curves[leg].point_at(t)
    }

    /// `theta_i^* f(t)`.
    pub fn induced_eval(&self, leg: usize, t: f64) -> f64 {
        self.induced[leg].eval(t)
    }

    /// Composition of the induced maps once around the cycle.
    pub fn first_return(&self, t: f64) -> f64 {
        let mut s = t;
        for i in 0..self.k {
            s = self.induced_eval(i, s);
        }
        s
    }

    /// Sampled polylines `(leg, t, x, y, theta)` for plotting.
    pub fn polylines(&self) -> Vec<(usize, f64, [f64; 3])> {
        let mut out = Vec::new();
        for (i, c) in self.curves.iter().enumerate() {
            for (t, p) in c.params.iter().zip(&c.points) {
                out.push((i, *t, [p[0], p[1], p[2]]));
            }
        }
        out
    }
}

fn build_induced(f: &SystemInstance, curves: &[CenterCurve], t0: f64) -> PhResult<Vec<InducedMap>> {
    let k = curves.len();
    let mut out = Vec::with_capacity(k);
    for (i, c) in curves.iter().enumerate() {
        let rate_at = |t: f64| -> f64 { (f.jacobian(&c.point_at(t)) * c.tangent_at(t)).norm() };
        let h = c.params[1] - c.params[0];
        let rate: Vec<f64> = c.params.iter().map(|&t| rate_at(t)).collect();
        // composite Simpson per cell, anchored at t = 0
        let zero = c.params.iter().position(|&t| t.abs() < 0.5 * h).ok_or(PhError::WindowExhausted)?;
        let mut values = vec![0.0; c.params.len()];
        for j in zero + 1..c.params.len() {
            let (a, b) = (c.params[j - 1], c.params[j]);
            values[j] = values[j - 1] + h / 6.0 * (rate[j - 1] + 4.0 * rate_at(0.5 * (a + b)) + rate[j]);
        }
        for j in (0..zero).rev() {
            let (a, b) = (c.params[j], c.params[j + 1]);
            values[j] = values[j + 1] - h / 6.0 * (rate[j] + 4.0 * rate_at(0.5 * (a + b)) + rate[j + 1]);
        }
        let next = &curves[(i + 1) % k];
        let periods = match (c.closure, next.closure) {
            (Some(a), Some(b)) => Some((a.length, b.length)),
            _ => None,
        };
        out.push(InducedMap {
            leg: i,
            x0: c.params[0],
            h,
            values,
            rate,
            offset: if i + 1 == k { t0 } else { 0.0 },
            periods,
        });
    }
    Ok(out)
}

/// Largest `d(theta_{i+1}(theta_i^* f(t)), f(theta_i(t)))` over `samples`
/// parameters per leg inside `[-inner, inner]`.
pub fn commutation_residual(f: &SystemInstance, fam: &PeriodicCenterFamily, inner: f64, samples: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..fam.k {
        for j in 0..samples {
            let t = -inner + 2.0 * inner * j as f64 / (samples - 1).max(1) as f64;
            let img = fam.induced_eval(i, t);
            let a = fam.point((i + 1) % fam.k, img);
            let b = f.eval(&fam.point(i, t));
            worst = worst.max(torus_distance(&a, &b));
        }
    }
    worst
}

/// Legs `theta_i` through `f^i(w)` on `[-window, window]`, oriented by the
/// transported center orientation, with `theta_0(t0) = f^k(w)`.
pub fn build_periodic_family(f: &SystemInstance, conn: &Connection, window: f64) -> PhResult<PeriodicCenterFamily> {
    let (w, k, t) = match conn {
        Connection::PeriodicPoint { p, k } => (*p, *k, 0.0),
        Connection::Segment(s) => (s.start, s.k, s.t),
    };
    let step = 1.0 / 256.0;
    let mut curves = Vec::with_capacity(k);
    let mut orient = 1;
    let mut p = w;
    for i in 0..k {
        if i > 0 {
            orient *= center_orientation_transport(f, &f.inverse(&p), 1)?;
        }
        curves.push(center_curve_window(f, &p, window, orient, step)?);
        p = f.eval(&p);
    }
    let total = orient * center_orientation_transport(f, &f.inverse(&p), 1)?;
    if total < 0 {
        return Err(PhError::OrientationViolation);
    }
    let closed = curves.iter().all(|c| c.closure.is_some());
    if !closed && (curves.iter().any(|c| c.closure.is_some()) || window < 10.0 * t.abs()) {
        return Err(PhError::WindowExhausted);
    }
    let induced = build_induced(f, &curves, t)?;
    let mut fam = PeriodicCenterFamily { curves, t0: t, k, window, commutation_residual: 0.0, induced };
    let inner = if closed { 0.5 } else { 0.5 * window };
    fam.commutation_residual = commutation_residual(f, &fam, inner, 65);
    if torus_distance(&fam.point(0, fam.t0), &f.iterate(&w, k)) > 1e-8 {
        return Err(PhError::NotInvariant(torus_distance(&fam.point(0, fam.t0), &f.iterate(&w, k))));
    }
    Ok(fam)
}

/// The induced maps of a family.
pub fn induced_map(fam: &PeriodicCenterFamily) -> Vec<InducedMap> {
    fam.induced.clone()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCurveReport {
    pub curve: CenterCurve,
    /// Invariance residual per refinement level.
    pub residuals: Vec<f64>,
}

/// Center curve through `p` whose center leaf is `f^m`-invariant (periodic
/// points, or base-periodic circles), refined until the image of its inner half
/// lies on it to `1e-6`.
pub fn invariant_center_curve_at_periodic(
    f: &SystemInstance,
    p: &Point3,
    m: usize,
    half: f64,
) -> PhResult<InvariantCurveReport> {
    let mut residuals = Vec::new();
    let mut step = 0.05;
    for level in 0..5 {
        let curve = center_curve_window(f, p, half, 1, step)?;
        if level == 0 {
            let off = nearest_distance(&curve, &f.iterate(p, m));
            if off > 1e-10 {
                return Err(PhError::HypothesisViolation(format!("f^m(p) is off the center leaf of p ({off:.2e})")));
            }
        }
        let res = invariance_residual(f, &curve, m, half);
        residuals.push(res);
        if res < 1e-6 {
            return Ok(InvariantCurveReport { curve, residuals });
        }
        step /= 4.0;
    }
    Err(PhError::NotInvariant(*residuals.last().unwrap()))
}

fn nearest_distance(c: &CenterCurve, q: &Point3) -> f64 {
    let d = |s: f64| torus_distance(&c.point_at(s), q);
    let mut best = (f64::INFINITY, 0.0);
    for s in &c.params {
        let v = d(*s);
        if v < best.0 {
            best = (v, *s);
        }
    }
    let h = c.params[1] - c.params[0];
    let (mut lo, mut hi) = (best.1 - h, best.1 + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if d(m1) < d(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    d(0.5 * (lo + hi))
}

/// One-sided Hausdorff distance from `f^m` of the inner half of the curve to
/// the curve.
fn invariance_residual(f: &SystemInstance, c: &CenterCurve, m: usize, half: f64) -> f64 {
    (0..33)
        .map(|j| {
            let t = -0.5 * half + half * j as f64 / 32.0;
            nearest_distance(c, &f.iterate(&c.point_at(t), m))
        })
        .fold(0.0, f64::max)
}

/// Near return through a chosen point `y` (for instance a base-periodic
/// vertical circle) with the first-order center offset.
pub fn near_return_at(f: &SystemInstance, y: &Point3, k: usize) -> PhResult<NearReturn> {
    let ec = center_direction(f, y)?;
    let v = log_map(y, &f.iterate(y, k));
    let c = v.dot(&ec);
    Ok(NearReturn { y: *y, k, eps_return: v.norm(), target: *y, eps_target: 0.0, center_offset: c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{default_omega, MapSpec};
    use approx::assert_abs_diff_eq;

    fn frac_dist(v: f64) -> f64 {
        (v - v.round()).abs()
    }

    #[test]
    fn fixed_point_returns_itself() {
        let f = MapSpec::reversing().instance();
        let x = Point3::xyz(0.0, 0.0, default_omega() / 2.0);
        let nr = find_near_return(&f, &x, 3, 0.05, 1).unwrap();
        assert_eq!(nr.k, 1);
        assert_eq!(nr.eps_return, 0.0);
        assert_eq!(nr.y, x);
    }

    #[test]
    fn product_return_times_follow_rotation() {
        let f = MapSpec::product().instance();
        let x = Point3::xyz(0.0, 0.0, 0.3);
        let w = default_omega();
        for eps in [0.2, 0.1, 0.04] {
            let nr = find_near_return(&f, &x, 15, eps, 7).unwrap();
            // oracle: the first k with ||k w|| below eps
            let kk = (1..=15).find(|&k| frac_dist(k as f64 * w) < eps - 1e-9).unwrap();
            assert_eq!(nr.k, kk, "eps {eps}");
            assert_abs_diff_eq!(nr.eps_return, frac_dist(kk as f64 * w), epsilon = 1e-9);
        }
    }

    #[test]
    fn skew_return_reevaluates() {
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.31, 0.72, 0.4);
        let nr = find_near_return(&f, &x, 12, 0.05, 3).unwrap();
        let fy = f.iterate(&nr.y, nr.k);
        assert!(torus_distance(&nr.y, &x) < 0.05);
        assert!(torus_distance(&fy, &x) < 0.05);
        assert_abs_diff_eq!(torus_distance(&nr.y, &fy), nr.eps_return, epsilon = 1e-14);
    }

    #[test]
    fn product_connection_is_vertical_arc() {
        let f = MapSpec::product().instance();
        let y = Point3::xyz(0.2, 0.4, 0.1);
        let nr = near_return_at(&f, &y, 2).unwrap();
        let Connection::Segment(s) = center_connection(&f, &nr).unwrap() else { panic!() };
        let expect = 2.0 * default_omega() - 1.0;
        assert_abs_diff_eq!(s.t, expect, epsilon = 1e-12);
        assert!(s.tangency_defect < 1e-10);
    }

    #[test]
    fn skew_connection_length_bounded() {
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.55, 0.15, 0.6);
        let nr = find_near_return(&f, &x, 12, 0.06, 5).unwrap();
        let Connection::Segment(s) = center_connection(&f, &nr).unwrap() else { panic!() };
        assert!(s.t.abs() <= SEGMENT_CONSTANT * nr.eps_return);
        assert!(log_map(&s.curve.end(), &f.iterate(&s.start, s.k)).norm() < 1e-10);
    }

    #[test]
    fn product_family_closed_form() {
        let f = MapSpec::product().instance();
        let y = Point3::xyz(0.2, 0.4, 0.0);
        let conn = center_connection(&f, &near_return_at(&f, &y, 2).unwrap()).unwrap();
        let fam = build_periodic_family(&f, &conn, 0.6).unwrap();
        assert_abs_diff_eq!(fam.t0, 2.0 * default_omega() - 1.0, epsilon = 1e-12);
        assert!(fam.commutation_residual < 1e-10);
        for c in &fam.curves {
            assert!(c.speed_defect() < 1e-10);
        }
        for t in [-0.3, 0.0, 0.2] {
            assert_abs_diff_eq!(fam.induced_eval(0, t), t, epsilon = 1e-10);
            assert_abs_diff_eq!(fam.induced_eval(1, t), t + fam.t0, epsilon = 1e-10);
        }
        assert_abs_diff_eq!(fam.first_return(0.0), fam.t0, epsilon = 1e-12);
    }

    #[test]
    fn skew_family_commutes() {
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.55, 0.15, 0.6);
        let nr = find_near_return(&f, &x, 12, 0.06, 5).unwrap();
        let conn = center_connection(&f, &nr).unwrap();
        let fam = build_periodic_family(&f, &conn, 0.6).unwrap();
        assert!(fam.commutation_residual < 1e-6);
        assert_abs_diff_eq!(fam.first_return(0.0), fam.t0, epsilon = 1e-8);
        for m in &fam.induced {
            let mut prev = f64::NEG_INFINITY;
            for j in 0..50 {
                let t = -0.45 + 0.9 * j as f64 / 49.0;
                let v = m.eval(t);
                assert!(v > prev);
                prev = v;
                let e = 1e-5;
                let fd = (m.eval(t + e) - m.eval(t - e)) / (2.0 * e);
                assert_abs_diff_eq!(fd, m.derivative(t), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn reversing_family_needs_even_period() {
        let f = MapSpec::reversing().instance();
        let y = Point3::xyz(0.2, 0.4, 0.1);
        let conn = center_connection(&f, &near_return_at(&f, &y, 2).unwrap());
        // f^2 over a period-2 base point is the identity on the fiber
        assert!(matches!(conn, Ok(Connection::PeriodicPoint { .. })));
        let nr = near_return_at(&f, &Point3::xyz(0.0, 0.0, 0.1), 1).unwrap();
        let conn = center_connection(&f, &nr).unwrap();
        assert!(matches!(build_periodic_family(&f, &conn, 0.6), Err(PhError::OrientationViolation)));
    }

    #[test]
    fn invariant_curve_at_periodic() {
        let cases = [
            (MapSpec::product(), Point3::xyz(0.0, 0.0, 0.3), 1),
            (MapSpec::skew(0.05), Point3::xyz(0.2, 0.4, 0.3), 2),
            (MapSpec::reversing(), Point3::xyz(0.0, 0.0, 0.1), 1),
        ];
        for (spec, p, m) in cases {
            let rep = invariant_center_curve_at_periodic(&spec.instance(), &p, m, 0.6).unwrap();
            assert!(rep.residuals[0] < 1e-10);
        }
        let f = MapSpec::skew(0.05).instance();
        let rep = invariant_center_curve_at_periodic(&f, &Point3::xyz(0.13, 0.4, 0.3), 1, 0.6);
        assert!(matches!(rep, Err(PhError::HypothesisViolation(_))));
    }
}
