//! Local stable/unstable graphs by graph transform, center-curve integration,
//! cs-plaques, local product structure and the tubular-inclusion check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PhError, PhResult};
use crate::geometry::{cubic_uniform, exp_map, log_map, Mat3, Point3, Vec3};
use crate::splitting::{estimate_splitting, SplittingFrame, DEFAULT_DEPTH};
use crate::systems::SystemInstance;

/// Number of grid intervals of a graph (`2^6`).
pub const GRAPH_INTERVALS: usize = 64;
/// Chart half-width beyond which a graph iterate counts as escaped.
pub const CHART_SIZE: f64 = 0.1;
pub const DEFAULT_DELTA: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphKind {
    Stable,
    Unstable,
}

impl GraphKind {
    /// Chart coordinate index of the graph domain (0 = s, 2 = u).
    fn domain(self) -> usize {
        match self {
            GraphKind::Stable => 0,
            GraphKind::Unstable => 2,
        }
    }

    /// Indices of the two value coordinates.
    fn values(self) -> [usize; 2] {
        match self {
            GraphKind::Stable => [1, 2],
            GraphKind::Unstable => [0, 1],
        }
    }
}

/// Graph of `phi: E^kind(delta) -> complement` sampled on a uniform grid,
/// expressed in the chart `v -> exp_base(B v)` with `B = [e_s, e_c, e_u]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalGraph {
    pub base: Point3,
    pub kind: GraphKind,
    pub radius: f64,
    pub basis: Mat3,
    pub values_a: Vec<f64>,
    pub values_b: Vec<f64>,
    /// Transform depth used.
    pub depth: usize,
    /// Sup-change at the last depth increment.
    pub last_change: f64,
}

struct Chart {
    base: Point3,
    basis: Mat3,
    inv: Mat3,
}

impl Chart {
    fn new(fr: &SplittingFrame) -> PhResult<Self> {
        let basis = fr.basis();
        let inv = basis.try_inverse().ok_or(PhError::DegenerateFrame)?;
        Ok(Self { base: fr.base, basis, inv })
    }

    fn coords(&self, p: &Point3) -> Vec3 {
        self.inv * log_map(&self.base, p)
    }

    fn point(&self, v: &Vec3) -> Point3 {
        exp_map(&self.base, &(self.basis * v))
    }
}

impl LocalGraph {
    fn h(&self) -> f64 {
        2.0 * self.radius / GRAPH_INTERVALS as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=GRAPH_INTERVALS).map(|i| -self.radius + self.h() * i as f64).collect()
    }

    /// Graph values `(a, b)` at domain coordinate `r`.
    pub fn eval(&self, r: f64) -> (f64, f64) {
        (
            cubic_uniform(&self.values_a, -self.radius, self.h(), r),
            cubic_uniform(&self.values_b, -self.radius, self.h(), r),
        )
    }

    /// Chart vector of the graph point over `r`.
    pub fn chart_vector(&self, r: f64) -> Vec3 {
        let (a, b) = self.eval(r);
        let mut v = Vec3::zeros();
        v[self.kind.domain()] = r;
        let [i, j] = self.kind.values();
        v[i] = a;
        v[j] = b;
        v
    }

    /// Displacement from the base point (flat chart) of the graph point over `r`.
    pub fn offset(&self, r: f64) -> Vec3 {
        self.basis * self.chart_vector(r)
    }

    pub fn point(&self, r: f64) -> Point3 {
        exp_map(&self.base, &self.offset(r))
    }

    /// Chart coordinates of `p` relative to this graph's base frame.
    pub fn coords_of(&self, p: &Point3) -> Vec3 {
        self.basis.try_inverse().unwrap_or_else(Mat3::zeros) * log_map(&self.base, p)
    }

    /// Central-difference slope `|d phi / dr|` at `r`.
    pub fn slope(&self, r: f64) -> f64 {
        let e = 1e-3 * self.radius;
        let (a1, b1) = self.eval(r + e);
        let (a0, b0) = self.eval(r - e);
        (((a1 - a0) / (2.0 * e)).powi(2) + ((b1 - b0) / (2.0 * e)).powi(2)).sqrt()
    }

    pub fn max_slope(&self) -> f64 {
        let h = self.h();
        self.grid()
            .iter()
            .map(|&r| self.slope(r.clamp(-self.radius + h, self.radius - h)))
            .fold(0.0, f64::max)
    }

    /// Arc length of the graph from the base to the point over `r`.
    pub fn arc_length(&self, r: f64) -> f64 {
        let n = 200;
        let mut len = 0.0;
        let mut prev = self.offset(0.0);
        for i in 1..=n {
            let q = self.offset(r * i as f64 / n as f64);
            len += (q - prev).norm();
            prev = q;
        }
        len
    }
}

/// Transform configuration shared by the stable and unstable variants.
#[derive(Clone, Copy, Debug)]
pub struct GraphOptions {
    pub delta: f64,
    pub tol: f64,
    pub max_depth: usize,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self { delta: DEFAULT_DELTA, tol: 1e-10, max_depth: 200 }
    }
}

/// One transform step: given the graph at the orbit point `next` (in the map
/// direction), produce the graph at `cur` by pulling back through `back`.
fn transform_step(
    back: &dyn Fn(&Point3) -> Point3,
    kind: GraphKind,
    cur: &Chart,
    next: &Chart,
    next_vals: Option<(&[f64], &[f64])>,
    delta: f64,
) -> PhResult<(Vec<f64>, Vec<f64>)> {
    let n = GRAPH_INTERVALS;
    let h = 2.0 * delta / n as f64;
    let d = kind.domain();
    let [ia, ib] = kind.values();
    let next_point = |r: f64| -> Point3 {
        let mut v = Vec3::zeros();
        v[d] = r;
        if let Some((va, vb)) = next_vals {
            v[ia] = cubic_uniform(va, -delta, h, r);
            v[ib] = cubic_uniform(vb, -delta, h, r);
        }
        next.point(&v)
    };
    // domain coordinate (in `cur`) reached from `r` on the next graph
    let reach = |r: f64| -> Vec3 { cur.coords(&back(&next_point(r))) };
    // linear rate of the domain coordinate
    let e = 1e-6 * delta;
    let rate = (reach(e)[d] - reach(-e)[d]) / (2.0 * e);
    if !(rate.abs() > 1e-12) {
        return Err(PhError::NotContracting);
    }
    let mut va = Vec::with_capacity(n + 1);
    let mut vb = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let target = -delta + h * i as f64;
        let mut r = target / rate;
        let mut c = reach(r);
        for _ in 0..30 {
            let err = c[d] - target;
            if err.abs() < 1e-16 + 1e-14 * delta {
                break;
            }
            let slope = (reach(r + e)[d] - reach(r - e)[d]) / (2.0 * e);
            r -= err / slope;
            c = reach(r);
        }
        if c.amax() > CHART_SIZE || r.abs() > 2.0 * delta {
            return Err(PhError::BoxEscape);
        }
        va.push(c[ia]);
        vb.push(c[ib]);
    }
    Ok((va, vb))
}

fn local_graph(f: &SystemInstance, x: &Point3, kind: GraphKind, opts: GraphOptions) -> PhResult<LocalGraph> {
    if opts.delta > CHART_SIZE / 2.0 {
        return Err(PhError::OutOfChart);
    }
    let forward = |p: &Point3| f.eval(p);
    let backward = |p: &Point3| f.inverse(p);
    // orbit in the direction in which the graph is carried toward x
    let (step_out, back): (&dyn Fn(&Point3) -> Point3, &dyn Fn(&Point3) -> Point3) = match kind {
        GraphKind::Stable => (&forward, &backward),
        GraphKind::Unstable => (&backward, &forward),
    };
    let mut orbit = vec![*x];
    let mut charts = vec![Chart::new(&estimate_splitting(f, x, DEFAULT_DEPTH)?)?];
    let ensure = |orbit: &mut Vec<Point3>, charts: &mut Vec<Chart>, m: usize| -> PhResult<()> {
        while orbit.len() <= m {
            let nx = step_out(orbit.last().unwrap());
            charts.push(Chart::new(&estimate_splitting(f, &nx, DEFAULT_DEPTH)?)?);
            orbit.push(nx);
        }
        Ok(())
    };
    let run = |orbit: &mut Vec<Point3>, charts: &mut Vec<Chart>, depth: usize| -> PhResult<(Vec<f64>, Vec<f64>)> {
        ensure(orbit, charts, depth)?;
        let mut vals: Option<(Vec<f64>, Vec<f64>)> = None;
        for j in (0..depth).rev() {
            let nv = vals.as_ref().map(|(a, b)| (a.as_slice(), b.as_slice()));
            vals = Some(transform_step(back, kind, &charts[j], &charts[j + 1], nv, opts.delta)?);
        }
        Ok(vals.expect("depth >= 1"))
    };
    let step = 5;
    let mut depth = step;
    let mut prev = run(&mut orbit, &mut charts, depth)?;
    let mut last_change = f64::INFINITY;
    let mut increases = 0;
    loop {
        depth += step;
        let cur = run(&mut orbit, &mut charts, depth)?;
        let change = prev
            .0
            .iter()
            .zip(&cur.0)
            .chain(prev.1.iter().zip(&cur.1))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if change >= last_change && change > opts.tol {
            increases += 1;
            if increases >= 5 {
                return Err(PhError::NotContracting);
            }
        } else {
            increases = 0;
        }
        last_change = change;
        prev = cur;
        if change < opts.tol || depth >= opts.max_depth {
            break;
        }
    }
    Ok(LocalGraph {
        base: *x,
        kind,
        radius: opts.delta,
        basis: charts[0].basis,
        values_a: prev.0,
        values_b: prev.1,
        depth,
        last_change,
    })
}

/// Local stable manifold `F^s_x(delta)` as a graph over `E^s_x(delta)`.
pub fn stable_graph(f: &SystemInstance, x: &Point3, opts: GraphOptions) -> PhResult<LocalGraph> {
    local_graph(f, x, GraphKind::Stable, opts)
}

/// Local unstable manifold `F^u_x(delta)` as a graph over `E^u_x(delta)`.
pub fn unstable_graph(f: &SystemInstance, x: &Point3, opts: GraphOptions) -> PhResult<LocalGraph> {
    local_graph(f, x, GraphKind::Unstable, opts)
}

/// Membership test: chart coordinates of `p` relative to `g`, and the distance
/// from `p` to the graph in the complementary coordinates.
pub fn graph_membership(g: &LocalGraph, p: &Point3) -> (f64, f64) {
    let c = g.coords_of(p);
    let r = c[g.kind.domain()];
    let (a, b) = g.eval(r);
    let [ia, ib] = g.kind.values();
    (r, ((c[ia] - a).powi(2) + (c[ib] - b).powi(2)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// `max_n max_samples |r_n| / (lambda^n delta)`.
    pub worst_ratio: f64,
    /// Largest distance from an iterated sample to the target graph.
    pub worst_offset: f64,
    pub n_max: usize,
}

/// Check `f^{±n}(F_x(delta)) ⊆ F_{f^{±n}x}(lambda^n delta)` for `n <= n_max`.
pub fn contraction_check(
    f: &SystemInstance,
    x: &Point3,
    kind: GraphKind,
    lambda: f64,
    n_max: usize,
    opts: GraphOptions,
) -> PhResult<ContractionReport> {
    let g0 = local_graph(f, x, kind, opts)?;
    let samples: Vec<Point3> = g0.grid().iter().map(|&r| g0.point(r)).collect();
    let mut worst_ratio: f64 = 0.0;
    let mut worst_offset: f64 = 0.0;
    let mut base = *x;
    let mut pts = samples;
    for n in 1..=n_max {
        let step = |p: &Point3| match kind {
            GraphKind::Stable => f.eval(p),
            GraphKind::Unstable => f.inverse(p),
        };
        base = step(&base);
        pts = pts.iter().map(step).collect();
        let gn = local_graph(f, &base, kind, opts)?;
        for p in &pts {
            let (r, off) = graph_membership(&gn, p);
            worst_ratio = worst_ratio.max(r.abs() / (lambda.powi(n as i32) * opts.delta));
            worst_offset = worst_offset.max(off);
        }
    }
    Ok(ContractionReport { worst_ratio, worst_offset, n_max })
}

/// Arc-length parametrized curve tangent to `E^c`, stored as lifted samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterCurve {
    pub params: Vec<f64>,
    /// Lifted (unwrapped) coordinates.
    pub points: Vec<Vec3>,
    pub orientation: i32,
    /// Set when the curve closes up: `(length, lift shift over one period)`.
    #[serde(default)]
    pub closure: Option<Closure>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Closure {
    pub length: f64,
    pub shift: Vec3,
}

impl CenterCurve {
    pub fn length(&self) -> f64 {
        (self.params.last().unwrap() - self.params[0]).abs()
    }

    pub fn start(&self) -> Point3 {
        Point3::new(self.points[0])
    }

    pub fn end(&self) -> Point3 {
        Point3::new(*self.points.last().unwrap())
    }

    /// Reduce `t` into `[-L/2, L/2)` for closed curves, returning the number of
    /// periods removed.
    pub fn reduce(&self, t: f64) -> (f64, f64) {
        match self.closure {
            Some(c) => {
                let m = ((t + 0.5 * c.length) / c.length).floor();
                (t - m * c.length, m)
            }
            None => (t, 0.0),
        }
    }

    /// Lifted point at parameter `t` by cubic interpolation of the samples.
    pub fn lifted_at(&self, t: f64) -> Vec3 {
        let (t, m) = self.reduce(t);
        let shift = self.closure.map(|c| c.shift * m).unwrap_or_else(Vec3::zeros);
        self.lifted_raw(t) + shift
    }

    /// Unit tangent at `t` from the interpolant.
    pub fn tangent_at(&self, t: f64) -> Vec3 {
        let (t, _) = self.reduce(t);
        let h = self.params[1] - self.params[0];
        let mut out = Vec3::zeros();
        for c in 0..3 {
            let v: Vec<f64> = self.points.iter().map(|p| p[c]).collect();
            out[c] = crate::geometry::cubic_uniform_deriv(&v, self.params[0], h, t);
        }
        out.normalize()
    }

    fn lifted_raw(&self, t: f64) -> Vec3 {
        let h = self.params[1] - self.params[0];
        let x0 = self.params[0];
        let mut out = Vec3::zeros();
        for c in 0..3 {
            let v: Vec<f64> = self.points.iter().map(|p| p[c]).collect();
            out[c] = cubic_uniform(&v, x0, h, t);
        }
        out
    }

    pub fn point_at(&self, t: f64) -> Point3 {
        Point3::new(self.lifted_at(t))
    }

    /// Largest deviation of consecutive-sample speed from 1.
    pub fn speed_defect(&self) -> f64 {
        self.points
            .windows(2)
            .zip(self.params.windows(2))
            .map(|(p, t)| ((p[1] - p[0]).norm() / (t[1] - t[0]).abs() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest sine of the angle between chord directions and `E^c`.
    pub fn tangency_defect(&self, f: &SystemInstance) -> PhResult<f64> {
        let mut worst: f64 = 0.0;
        for w in self.points.windows(2) {
            let mid = Point3::new(0.5 * (w[0] + w[1]));
            let ec = estimate_splitting(f, &mid, DEFAULT_DEPTH).map_err(|_| PhError::FieldGap)?.ec;
            let d = (w[1] - w[0]).normalize();
            worst = worst.max(d.cross(&ec).norm());
        }
        Ok(worst)
    }
}

/// RK4 integration of the unit center field from `x` over length `len`.
pub fn center_curve_integrate(
    f: &SystemInstance,
    x: &Point3,
    len: f64,
    orientation: i32,
    steps: usize,
) -> PhResult<CenterCurve> {
    let sgn = if orientation < 0 { -1.0 } else { 1.0 };
    let field = |v: &Vec3| -> PhResult<Vec3> {
        estimate_splitting(f, &Point3::new(*v), DEFAULT_DEPTH)
            .map(|fr| fr.ec * sgn)
            .map_err(|_| PhError::FieldGap)
    };
    let steps = steps.max(4);
    let h = len / steps as f64;
    let mut pts = vec![x.coords];
    let mut params = vec![0.0];
    let mut v = x.coords;
    for i in 0..steps {
        let k1 = field(&v)?;
        let k2 = field(&(v + k1 * (h / 2.0)))?;
        let k3 = field(&(v + k2 * (h / 2.0)))?;
        let k4 = field(&(v + k3 * h))?;
        v += (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (h / 6.0);
        pts.push(v);
        params.push(sgn * h * (i + 1) as f64);
    }
    Ok(CenterCurve { params, points: pts, orientation: sgn as i32, closure: None })
}

/// Center curve through `x` on the parameter window `[-half, half]`, sampled
/// with spacing close to `step`; closure is detected and recorded.
pub fn center_curve_window(
    f: &SystemInstance,
    x: &Point3,
    half: f64,
    orientation: i32,
    step: f64,
) -> PhResult<CenterCurve> {
    let n = ((half / step).ceil() as usize).max(4);
    let back = center_curve_integrate(f, x, half, -orientation, n)?;
    let fwd = center_curve_integrate(f, x, half, orientation, n)?;
    let h = half / n as f64;
    let mut params = Vec::with_capacity(2 * n + 1);
    let mut points = Vec::with_capacity(2 * n + 1);
    for i in (1..=n).rev() {
        params.push(-h * i as f64);
        points.push(back.points[i]);
    }
    for i in 0..=n {
        params.push(h * i as f64);
        points.push(fwd.points[i]);
    }
    let mut c = CenterCurve { params, points, orientation: if orientation < 0 { -1 } else { 1 }, closure: None };
    c.closure = detect_closure(&c, 1e-9);
    Ok(c)
}

/// First positive parameter at which the curve returns to its point at `0`.
pub fn detect_closure(c: &CenterCurve, tol: f64) -> Option<Closure> {
    let t0 = c.params[0];
    let start = c.lifted_raw(t0);
    let h = c.params[1] - c.params[0];
    let i0 = c.params.iter().position(|&t| t > t0 + 10.0 * h)?;
    let dist = |t: f64| torus_gap(&c.lifted_raw(t), &start);
    for i in i0 + 1..c.params.len() - 1 {
        let (a, b, d) = (dist(c.params[i - 1]), dist(c.params[i]), dist(c.params[i + 1]));
        if b <= a && b <= d && b < 2.0 * h {
            // golden-section refinement on the bracket
            let (mut lo, mut hi) = (c.params[i - 1], c.params[i + 1]);
            let g = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..80 {
                let m1 = hi - g * (hi - lo);
                let m2 = lo + g * (hi - lo);
                if dist(m1) < dist(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let l = 0.5 * (lo + hi);
            if dist(l) < tol {
                let shift = c.lifted_raw(l) - start;
                return Some(Closure { length: l - t0, shift: shift.map(|v| v.round()) });
            }
        }
    }
    None
}

fn torus_gap(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).map(crate::geometry::wrap_signed).norm()
}

/// Union of local stable graphs over samples of a center curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plaque {
    /// Curve parameters of the fibers (uniform).
    pub params: Vec<f64>,
    pub fibers: Vec<LocalGraph>,
    /// Lifted position of each fiber base.
    pub bases: Vec<Vec3>,
    pub kind: GraphKind,
}

impl Plaque {
    /// Lifted point on the fiber at curve parameter `t`, graph coordinate `r`.
    pub fn lifted(&self, t: f64, r: f64) -> Vec3 {
        let h = self.params[1] - self.params[0];
        let per: Vec<Vec3> = self.fibers.iter().zip(&self.bases).map(|(g, b)| b + g.offset(r)).collect();
        let mut out = Vec3::zeros();
        for c in 0..3 {
            let v: Vec<f64> = per.iter().map(|p| p[c]).collect();
            out[c] = cubic_uniform(&v, self.params[0], h, t);
        }
        out
    }

    pub fn t_range(&self) -> (f64, f64) {
        (self.params[0], *self.params.last().unwrap())
    }
}

fn plaque_of(
    f: &SystemInstance,
    curve: &CenterCurve,
    kind: GraphKind,
    opts: GraphOptions,
    n_fibers: usize,
) -> PhResult<Plaque> {
    if curve.length() > 2.0 * CHART_SIZE {
        return Err(PhError::OutOfChart);
    }
    let (t0, t1) = (curve.params[0].min(*curve.params.last().unwrap()), curve.params[0].max(*curve.params.last().unwrap()));
    let n = n_fibers.max(4);
    let params: Vec<f64> = (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect();
    let mut fibers = Vec::with_capacity(n);
    let mut bases = Vec::with_capacity(n);
    for &t in &params {
        let b = curve.lifted_at(t);
        fibers.push(local_graph(f, &Point3::new(b), kind, opts)?);
        bases.push(b);
    }
    let plaque = Plaque { params, fibers, bases, kind };
    check_fiber_disjointness(&plaque, 1000, 7)?;
    Ok(plaque)
}

/// `F^cs_gamma(delta)`: stable fibers over the center curve.
pub fn cs_plaque(f: &SystemInstance, curve: &CenterCurve, opts: GraphOptions, n_fibers: usize) -> PhResult<Plaque> {
    plaque_of(f, curve, GraphKind::Stable, opts, n_fibers)
}

/// `F^cu_gamma(delta)`: unstable fibers over the center curve.
pub fn cu_plaque(f: &SystemInstance, curve: &CenterCurve, opts: GraphOptions, n_fibers: usize) -> PhResult<Plaque> {
    plaque_of(f, curve, GraphKind::Unstable, opts, n_fibers)
}

/// Random pairs of samples from distinct fibers must be separated by at least
/// a quarter of their parameter gap.
pub fn check_fiber_disjointness(p: &Plaque, pairs: usize, seed: u64) -> PhResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.fibers.len();
    let delta = p.fibers[0].radius;
    let mut worst = f64::INFINITY;
    for _ in 0..pairs {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n);
        if i == j {
            j = (j + 1) % n;
        }
        let ri = rng.gen_range(-delta..delta);
        let rj = rng.gen_range(-delta..delta);
        let a = p.bases[i] + p.fibers[i].offset(ri);
        let b = p.bases[j] + p.fibers[j].offset(rj);
        let gap = (p.params[i] - p.params[j]).abs();
        let ratio = (a - b).norm() / gap;
        worst = worst.min(ratio);
        if ratio < 0.25 {
            return Err(PhError::SelfIntersection);
        }
    }
    Ok(worst)
}

/// Largest angle between finite-difference tangent planes of the plaque and
/// the bundle sum `E^s+E^c` (or `E^c+E^u`) at the same points.
pub fn plaque_tangency_error(f: &SystemInstance, p: &Plaque, samples: usize) -> PhResult<f64> {
    let (t0, t1) = p.t_range();
    let delta = p.fibers[0].radius;
    let mut worst: f64 = 0.0;
    let ht = 1e-4 * (t1 - t0);
    let hr = 1e-4 * delta;
    for i in 0..samples {
        let a = (i as f64 + 0.5) / samples as f64;
        let t = t0 + (t1 - t0) * (0.2 + 0.6 * a);
        let r = delta * (1.6 * ((i * 7 % samples) as f64 + 0.5) / samples as f64 - 0.8);
        let dt = (p.lifted(t + ht, r) - p.lifted(t - ht, r)) / (2.0 * ht);
        let dr = (p.lifted(t, r + hr) - p.lifted(t, r - hr)) / (2.0 * hr);
        let normal = dt.cross(&dr).normalize();
        let fr = estimate_splitting(f, &Point3::new(p.lifted(t, r)), DEFAULT_DEPTH)?;
        let bnormal = match p.kind {
            GraphKind::Stable => fr.es_vec().cross(&fr.ec),
            GraphKind::Unstable => fr.ec.cross(&fr.eu_vec()),
        }
        .normalize();
        worst = worst.max(normal.cross(&bnormal).norm());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalProduct {
    /// `z = F^u_y ∩ F^cs_gamma`.
    pub z: Point3,
    /// Base point on the curve whose stable fiber contains `z`.
    pub w: Point3,
    pub t_w: f64,
    pub s: f64,
    pub u: f64,
    pub residual: f64,
    /// Ratios `|t_w|/d`, `|s|/d`, `|u|/d` with `d = d(x,y)`.
    pub bound_ratios: [f64; 3],
}

/// Newton solve of `plaque(t, s) = unstable_graph_y(u)` in lifted coordinates
/// around `anchor` (a lift of the curve start).
pub fn local_product_on(
    plaque: &Plaque,
    gu: &LocalGraph,
    anchor: &Vec3,
    guess: [f64; 3],
) -> PhResult<([f64; 3], f64)> {
    let ylift = anchor + log_map(&Point3::new(*anchor), &gu.base);
    let resid = |v: &[f64; 3]| -> Vec3 { plaque.lifted(v[0], v[1]) - (ylift + gu.offset(v[2])) };
    let mut v = guess;
    let mut r = resid(&v);
    let (t0, t1) = plaque.t_range();
    let delta = plaque.fibers[0].radius;
    for _ in 0..60 {
        if r.norm() < 1e-14 {
            break;
        }
        let mut j = Mat3::zeros();
        for c in 0..3 {
            let mut vp = v;
            let mut vm = v;
            let e = 1e-7;
            vp[c] += e;
            vm[c] -= e;
            j.set_column(c, &((resid(&vp) - resid(&vm)) / (2.0 * e)));
        }
        let step = j.lu().solve(&r).ok_or(PhError::NoIntersection)?;
        let mut damp = 1.0;
        loop {
            let cand = [v[0] - damp * step[0], v[1] - damp * step[1], v[2] - damp * step[2]];
            let rc = resid(&cand);
            if rc.norm() < r.norm() || damp < 1e-4 {
                v = cand;
                r = rc;
                break;
            }
            damp *= 0.5;
        }
    }
    if r.norm() > 1e-10 {
        return Err(PhError::NoIntersection);
    }
    let slack = 1e-9;
    if v[0] < t0 - slack || v[0] > t1 + slack || v[1].abs() > delta * 1.5 || v[2].abs() > gu.radius * 1.5 {
        return Err(PhError::OutOfChart);
    }
    Ok((v, r.norm()))
}

/// Parameter of the curve point nearest to `x`; errors if `x` is off the curve.
pub fn curve_param_of(curve: &CenterCurve, x: &Point3) -> PhResult<f64> {
    let anchor = Point3::new(curve.points[0]);
    let xl = curve.points[0] + log_map(&anchor, x);
    let (mut best, mut bd) = (0usize, f64::INFINITY);
    for (i, p) in curve.points.iter().enumerate() {
        let d = (p - xl).norm();
        if d < bd {
            bd = d;
            best = i;
        }
    }
    let mut t = curve.params[best];
    let h = 1e-6 * curve.length().max(1e-12);
    for _ in 0..20 {
        let g = |t: f64| (curve.lifted_at(t) - xl).norm_squared();
        let d1 = (g(t + h) - g(t - h)) / (2.0 * h);
        let d2 = (g(t + h) - 2.0 * g(t) + g(t - h)) / (h * h);
        if !(d2 > 0.0) {
            break;
        }
        let step = d1 / d2;
        t -= step;
        if step.abs() < 1e-15 {
            break;
        }
    }
    if (curve.lifted_at(t) - xl).norm() > 1e-8 {
        return Err(PhError::OutOfChart);
    }
    Ok(t)
}

/// Local product structure at `x`: the unique `z = F^u_y ∩ F^cs_gamma`.
pub fn local_product(
    f: &SystemInstance,
    x: &Point3,
    y: &Point3,
    curve: &CenterCurve,
    opts: GraphOptions,
) -> PhResult<LocalProduct> {
    let d = crate::geometry::torus_distance(x, y);
    if d > opts.delta / 4.0 {
        return Err(PhError::OutOfChart);
    }
    let plaque = cs_plaque(f, curve, opts, 9)?;
    let gu = unstable_graph(f, y, opts)?;
    let anchor = curve.points[0];
    // initial guess from the linear splitting at x
    let fr = estimate_splitting(f, x, DEFAULT_DEPTH)?;
    let tx = curve_param_of(curve, x)?;
    let c = fr.decompose(&(log_map(x, y)));
    let guess = [tx + c[1], c[0], -c[2]];
    let (v, residual) = local_product_on(&plaque, &gu, &anchor, guess)?;
    let z = Point3::new(plaque.lifted(v[0], v[1]));
    let w = Point3::new(plaque.lifted(v[0], 0.0));
    let dd = d.max(1e-300);
    Ok(LocalProduct {
        z,
        w,
        t_w: v[0] - tx,
        s: v[1],
        u: v[2],
        residual,
        bound_ratios: [(v[0] - tx).abs() / dd, v[1].abs() / dd, v[2].abs() / dd],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionReport {
    pub margin: f64,
    pub worst_stable_radius: f64,
    pub worst_cu_radius: f64,
    pub samples: usize,
}

/// Sampled check of `B(F^s_x(lambda delta), rho delta) ⊆ B^s_{sqrt(lambda) delta}(B^cu(x, delta))`.
///
/// Each sample is written as a point on the stable graph of some `w` in the flat
/// cu-disk at `x`; the required stable radius is its graph coordinate.
pub fn tubular_inclusion_check(
    f: &SystemInstance,
    x: &Point3,
    lambda: f64,
    rho: f64,
    samples: usize,
    seed: u64,
    opts: GraphOptions,
) -> PhResult<InclusionReport> {
    let delta = opts.delta;
    if delta > CHART_SIZE / 2.0 {
        return Err(PhError::OutOfChart);
    }
    let fr = estimate_splitting(f, x, DEFAULT_DEPTH)?;
    let gx = stable_graph(f, x, opts)?;
    // stable fibers over a (c,u) grid of the flat cu-disk, radius slightly above delta
    let m = 9;
    let reach = 1.2 * delta;
    let hc = 2.0 * reach / (m - 1) as f64;
    let mut fibers = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let c = -reach + hc * i as f64;
            let u = -reach + hc * j as f64;
            let off = fr.ec * c + fr.eu_vec() * u;
            let w = exp_map(x, &off);
            fibers.push((off, stable_graph(f, &w, opts)?));
        }
    }
    let lifted = |c: f64, u: f64, s: f64| -> Vec3 {
        // bicubic over the grid: interpolate along u for each c row, then along c
        let mut rows = Vec::with_capacity(m);
        for i in 0..m {
            let pts: Vec<Vec3> = (0..m).map(|j| fibers[i * m + j].0 + fibers[i * m + j].1.offset(s)).collect();
            let mut v = Vec3::zeros();
            for k in 0..3 {
                let col: Vec<f64> = pts.iter().map(|p| p[k]).collect();
                v[k] = cubic_uniform(&col, -reach, hc, u);
            }
            rows.push(v);
        }
        let mut out = Vec3::zeros();
        for k in 0..3 {
            let col: Vec<f64> = rows.iter().map(|p| p[k]).collect();
            out[k] = cubic_uniform(&col, -reach, hc, c);
        }
        out
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_s: f64 = 0.0;
    let mut worst_cu: f64 = 0.0;
    for _ in 0..samples {
        let s0 = rng.gen_range(-lambda * delta..=lambda * delta);
        let mut dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        while dir.norm() > 1.0 || dir.norm() < 1e-3 {
            dir = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let q = gx.offset(s0) + dir * (rho * delta * rng.gen_range(0.0..=1.0f64).cbrt() / dir.norm());
        let c = fr.decompose(&q);
        let mut v = [c[1], c[2], c[0]];
        let resid = |v: &[f64; 3]| lifted(v[0], v[1], v[2]) - q;
        let mut r = resid(&v);
        for _ in 0..40 {
            if r.norm() < 1e-15 {
                break;
            }
            let mut j = Mat3::zeros();
            for k in 0..3 {
                let mut vp = v;
                let mut vm = v;
                let e = 1e-6 * delta;
                vp[k] += e;
                vm[k] -= e;
                j.set_column(k, &((resid(&vp) - resid(&vm)) / (2.0 * e)));
            }
            let step = j.lu().solve(&r).ok_or(PhError::SamplingInconclusive)?;
            v = [v[0] - step[0], v[1] - step[1], v[2] - step[2]];
            r = resid(&v);
        }
        if r.norm() > 1e-12 {
            return Err(PhError::SamplingInconclusive);
        }
        worst_s = worst_s.max(v[2].abs());
        worst_cu = worst_cu.max((v[0] * v[0] + v[1] * v[1]).sqrt());
    }
    let margin = (lambda.sqrt() * delta - worst_s).min(delta - worst_cu);
    if margin.abs() < 1e-14 {
        return Err(PhError::SamplingInconclusive);
    }
    Ok(InclusionReport { margin, worst_stable_radius: worst_s, worst_cu_radius: worst_cu, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::MapSpec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn product_graphs_are_flat() {
        let f = MapSpec::product().instance();
        let x = Point3::xyz(0.3, 0.4, 0.5);
        let gs = stable_graph(&f, &x, GraphOptions::default()).unwrap();
        let gu = unstable_graph(&f, &x, GraphOptions::default()).unwrap();
        for v in gs.values_a.iter().chain(&gs.values_b).chain(&gu.values_a).chain(&gu.values_b) {
            assert!(v.abs() < 1e-13);
        }
    }

    #[test]
    fn skew_stable_graph_slope_zero_at_origin() {
        let f = MapSpec::skew(0.05).instance();
        let g = stable_graph(&f, &Point3::origin(), GraphOptions::default()).unwrap();
        assert!(g.slope(0.0) < 1e-6, "slope {}", g.slope(0.0));
        let (a, b) = g.eval(0.0);
        assert!(a.abs() < 1e-14 && b.abs() < 1e-14);
    }

    /// Independent oracle: the strong stable leaf of the skew map through
    /// `(b, t)` is `{(b + s v_s, t + c(s))}` with
    /// `c(s) = -sum_n eps (sin 2 pi x_n(s) - sin 2 pi x_n(0))`.
    #[test]
    fn skew_stable_graph_matches_series() {
        let eps = 0.05;
        let f = MapSpec::skew(eps).instance();
        let x = Point3::xyz(0.37, 0.81, 0.2);
        let g = stable_graph(&f, &x, GraphOptions::default()).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let vs = Vec3::new(-1.0, phi, 0.0).normalize();
        let ls = crate::systems::lambda_s();
        let series = |s: f64| -> f64 {
            let mut acc = 0.0;
            for n in 0..200 {
                // base orbit of x + s v_s is A^n b + s ls^n v_s
                let bn = {
                    let mut b = [x.coords[0], x.coords[1]];
                    for _ in 0..n {
                        b = [(2.0 * b[0] + b[1]).rem_euclid(1.0), (b[0] + b[1]).rem_euclid(1.0)];
                    }
                    b[0]
                };
                let sn = s * ls.powi(n) * vs[0];
                acc += eps * ((2.0 * std::f64::consts::PI * (bn + sn)).sin() - (2.0 * std::f64::consts::PI * bn).sin());
                if ls.powi(n) < 1e-18 {
                    break;
                }
            }
            -acc
        };
        for &r in &[-0.008, -0.003, 0.004, 0.009] {
            let p = g.offset(r);
            // base displacement is along v_s; its length is the oracle parameter
            let s = p[0] / vs[0];
            assert_abs_diff_eq!(p[1], s * vs[1], epsilon = 1e-11);
            assert_abs_diff_eq!(p[2], series(s), epsilon = 1e-10);
        }
    }

    #[test]
    fn stable_contraction_product_and_skew() {
        for spec in [MapSpec::product(), MapSpec::skew(0.05)] {
            let f = spec.instance();
            let lam = crate::systems::lambda_s().sqrt();
            let rep = contraction_check(&f, &Point3::xyz(0.12, 0.9, 0.3), GraphKind::Stable, lam, 6, GraphOptions::default()).unwrap();
            assert!(rep.worst_ratio <= 1.05);
            assert!(rep.worst_offset < 1e-9);
            let rep = contraction_check(&f, &Point3::xyz(0.12, 0.9, 0.3), GraphKind::Unstable, lam, 6, GraphOptions::default()).unwrap();
            assert!(rep.worst_ratio <= 1.05);
            assert!(rep.worst_offset < 1e-9);
        }
    }

    #[test]
    fn orbit_shadowing_rate() {
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.6, 0.25, 0.75);
        let g = stable_graph(&f, &x, GraphOptions::default()).unwrap();
        let mut p = g.point(0.008);
        let mut q = x;
        let mut prev = log_map(&q, &p).norm();
        for _ in 0..12 {
            p = f.eval(&p);
            q = f.eval(&q);
            let d = log_map(&q, &p).norm();
            assert!(d <= (crate::systems::lambda_s() + 0.05) * prev + 1e-12);
            prev = d;
        }
    }

    #[test]
    fn slope_sweep_shrinks_with_delta() {
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.1, 0.1, 0.1);
        let big = stable_graph(&f, &x, GraphOptions { delta: 1e-2, ..Default::default() }).unwrap();
        let small = stable_graph(&f, &x, GraphOptions { delta: 2e-4, ..Default::default() }).unwrap();
        assert!(small.max_slope() < 1e-3);
        assert!(small.max_slope() < big.max_slope());
    }

    #[test]
    fn arc_length_bracketing() {
        let f = MapSpec::skew(0.05).instance();
        let g = stable_graph(&f, &Point3::xyz(0.3, 0.3, 0.3), GraphOptions::default()).unwrap();
        for &r in &[0.002, 0.005, 0.009] {
            let l = g.arc_length(r);
            assert!(l >= r / 1.1 && l <= 1.1 * r);
        }
    }

    #[test]
    fn center_curve_is_vertical() {
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.2, 0.3, 0.4);
        let c = center_curve_integrate(&f, &x, 0.3, 1, 30).unwrap();
        assert_abs_diff_eq!(c.end().coords, Point3::xyz(0.2, 0.3, 0.7).coords, epsilon = 1e-12);
        assert!(c.speed_defect() < 1e-10);
        assert!(c.tangency_defect(&f).unwrap() < 1e-10);
        assert_abs_diff_eq!(c.length(), 0.3, epsilon = 1e-12);
        let w = center_curve_window(&f, &x, 0.6, 1, 1.0 / 256.0).unwrap();
        let cl = w.closure.unwrap();
        assert_abs_diff_eq!(cl.length, 1.0, epsilon = 1e-9);
        assert_eq!(cl.shift, Vec3::new(0.0, 0.0, 1.0));
        assert!((w.lifted_at(0.75) - w.lifted_at(-0.25) - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        let back = center_curve_integrate(&f, &c.end(), 0.3, -1, 30).unwrap();
        for (a, b) in back.points.iter().zip(c.points.iter().rev()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn plaque_checks() {
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.45, 0.2, 0.1);
        let c = center_curve_integrate(&f, &x, 0.02, 1, 8).unwrap();
        let p = cs_plaque(&f, &c, GraphOptions::default(), 9).unwrap();
        assert!(plaque_tangency_error(&f, &p, 20).unwrap() < 1e-3);
        assert!(check_fiber_disjointness(&p, 1000, 3).unwrap() > 0.25);
    }

    #[test]
    fn local_product_trivial_and_bounded() {
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.3, 0.55, 0.5);
        let c = center_curve_integrate(&f, &Point3::xyz(0.3, 0.55, 0.49), 0.02, 1, 8).unwrap();
        let lp = local_product(&f, &x, &x, &c, GraphOptions::default()).unwrap();
        assert!(log_map(&lp.z, &x).norm() < 1e-10);
        let y = exp_map(&x, &Vec3::new(6e-4, -5e-4, 5e-4));
        let lp = local_product(&f, &x, &y, &c, GraphOptions::default()).unwrap();
        assert!(lp.bound_ratios.iter().all(|r| *r < 4.0));
    }

    #[test]
    fn product_inclusion_margin() {
        let f = MapSpec::product().instance();
        let lam = crate::systems::lambda_s().sqrt();
        let rep = tubular_inclusion_check(&f, &Point3::xyz(0.2, 0.2, 0.2), lam, 1e-9, 1000, 1, GraphOptions::default()).unwrap();
        let expect = (lam.sqrt() - lam) * 1e-2;
        assert!(rep.margin >= expect * (1.0 - 1e-6));
        assert!(rep.margin <= expect * 1.05);
    }

    #[test]
    fn skew_inclusion_passes() {
        let f = MapSpec::skew(0.05).instance();
        let lam = 0.65;
        let rep = tubular_inclusion_check(&f, &Point3::xyz(0.7, 0.1, 0.9), lam, 1e-3, 500, 2, GraphOptions::default()).unwrap();
        assert!(rep.margin > 0.0);
    }
}
