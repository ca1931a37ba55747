//! Fixed points of maps `H: [a,b] x D^s -> R x R^s` (`s` in {1,2}) by the
//! Brouwer degree of the displacement `P = id - H` and box subdivision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{PhError, PhResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub a: f64,
    pub b: f64,
    pub s: usize,
}

impl BoxDomain {
    pub fn new(a: f64, b: f64, s: usize) -> PhResult<Self> {
        if !(a < b) || !(1..=2).contains(&s) {
            return Err(PhError::ConfigInvalid(format!("bad box a={a} b={b} s={s}")));
        }
        Ok(Self { a, b, s })
    }
}

/// Evaluation callback `H(t, v) = (h1, h2)`; unused components of `v` are 0.
pub type MapFn<'a> = dyn Fn(f64, [f64; 2]) -> (f64, [f64; 2]) + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryReport {
    /// `min (1 - ||h2||)` over the samples.
    pub slack_h2: f64,
    /// `min_v h1(a, v) - a`.
    pub slack_a: f64,
    /// `min_v b - h1(b, v)`.
    pub slack_b: f64,
    pub pass: bool,
}

/// Elliptical square-to-disk map, a homeomorphism of `[-1,1]^2` onto `D^2`.
pub fn square_to_disk(x: f64, y: f64) -> [f64; 2] {
    [x * (1.0 - 0.5 * y * y).sqrt(), y * (1.0 - 0.5 * x * x).sqrt()]
}

fn disk_points(s: usize, n: usize) -> Vec<[f64; 2]> {
    if s == 1 {
        (0..=n).map(|i| [-1.0 + 2.0 * i as f64 / n as f64, 0.0]).collect()
    } else {
        let mut out = Vec::new();
        for i in 0..=n {
            for j in 0..=n {
                out.push(square_to_disk(-1.0 + 2.0 * i as f64 / n as f64, -1.0 + 2.0 * j as f64 / n as f64));
            }
        }
        out
    }
}

pub fn boundary_hypotheses_check(h: &MapFn, dom: &BoxDomain, samples: usize, tol: f64) -> BoundaryReport {
    let n = samples.max(2);
    let vs = disk_points(dom.s, if dom.s == 1 { n } else { (n as f64).sqrt().ceil() as usize });
    let mut slack_h2 = f64::INFINITY;
    let mut slack_a = f64::INFINITY;
    let mut slack_b = f64::INFINITY;
    let nt = if dom.s == 1 { n } else { (n as f64).sqrt().ceil() as usize };
    for i in 0..=nt {
        let t = dom.a + (dom.b - dom.a) * i as f64 / nt as f64;
        for v in &vs {
            let (h1, h2) = h(t, *v);
            slack_h2 = slack_h2.min(1.0 - (h2[0] * h2[0] + h2[1] * h2[1]).sqrt());
            if i == 0 {
                slack_a = slack_a.min(h1 - dom.a);
            }
            if i == nt {
                slack_b = slack_b.min(dom.b - h1);
            }
        }
    }
    let pass = slack_h2 > tol && slack_a > tol && slack_b > tol;
    BoundaryReport { slack_h2, slack_a, slack_b, pass }
}

/// Axis-aligned box in the working coordinates `(t, x[, y])`, where `(x, y)`
/// parametrize the disk through [`square_to_disk`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl CoordBox {
    fn diameter(&self, s: usize) -> f64 {
        (0..=s).map(|i| (self.hi[i] - self.lo[i]).powi(2)).sum::<f64>().sqrt()
    }

    fn center(&self) -> [f64; 3] {
        [0.5 * (self.lo[0] + self.hi[0]), 0.5 * (self.lo[1] + self.hi[1]), 0.5 * (self.lo[2] + self.hi[2])]
    }
}

struct Displacement<'a> {
    h: &'a MapFn<'a>,
    s: usize,
}

impl Displacement<'_> {
    fn v_of(&self, c: [f64; 3]) -> [f64; 2] {
        if self.s == 1 {
            [c[1], 0.0]
        } else {
            square_to_disk(c[1], c[2])
        }
    }

    fn eval(&self, c: [f64; 3]) -> [f64; 3] {
        let v = self.v_of(c);
        let (h1, h2) = (self.h)(c[0], v);
        [c[0] - h1, v[0] - h2[0], if self.s == 2 { v[1] - h2[1] } else { 0.0 }]
    }
}

fn norm3(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[derive(Debug)]
enum DegErr {
    ZeroOnBoundary,
    Unresolved,
}

/// Winding number of the planar displacement around the boundary of a 2D box.
fn winding(p: &Displacement, b: &CoordBox, n: usize) -> Result<i32, DegErr> {
    let corners = [[b.lo[0], b.lo[1]], [b.hi[0], b.lo[1]], [b.hi[0], b.hi[1]], [b.lo[0], b.hi[1]]];
    let per = n / 4;
    let mut total = 0.0;
    let f = |u: [f64; 2]| -> Result<f64, DegErr> {
        let v = p.eval([u[0], u[1], 0.0]);
        if (v[0] * v[0] + v[1] * v[1]).sqrt() < 1e-12 {
            return Err(DegErr::ZeroOnBoundary);
        }
        Ok(v[1].atan2(v[0]))
    };
    for e in 0..4 {
        let (c0, c1) = (corners[e], corners[(e + 1) % 4]);
        let at = |s: f64| [c0[0] + (c1[0] - c0[0]) * s, c0[1] + (c1[1] - c0[1]) * s];
        for i in 0..per {
            let (s0, s1) = (i as f64 / per as f64, (i + 1) as f64 / per as f64);
            total += arc_angle(&f, &at, s0, s1, f(at(s0))?, f(at(s1))?, 0)?;
        }
    }
    Ok((total / (2.0 * PI)).round() as i32)
}

fn wrap_pi(a: f64) -> f64 {
    let mut d = a % (2.0 * PI);
    if d > PI {
        d -= 2.0 * PI;
    } else if d < -PI {
        d += 2.0 * PI;
    }
    d
}

fn arc_angle(
    f: &dyn Fn([f64; 2]) -> Result<f64, DegErr>,
    at: &dyn Fn(f64) -> [f64; 2],
    s0: f64,
    s1: f64,
    a0: f64,
    a1: f64,
    depth: usize,
) -> Result<f64, DegErr> {
    let d = wrap_pi(a1 - a0);
    if d.abs() <= PI / 4.0 {
        return Ok(d);
    }
    if depth > 30 {
        return Err(DegErr::Unresolved);
    }
    let sm = 0.5 * (s0 + s1);
    let am = f(at(sm))?;
    Ok(arc_angle(f, at, s0, sm, a0, am, depth + 1)? + arc_angle(f, at, sm, s1, am, a1, depth + 1)?)
}

/// Signed solid angle of the triangle `(a, b, c)` seen from the origin.
fn solid_angle(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> f64 {
    let cross = [b[1] * c[2] - b[2] * c[1], b[2] * c[0] - b[0] * c[2], b[0] * c[1] - b[1] * c[0]];
    let num = a[0] * cross[0] + a[1] * cross[1] + a[2] * cross[2];
    let (la, lb, lc) = (norm3(a), norm3(b), norm3(c));
    let dot = |x: [f64; 3], y: [f64; 3]| x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
    let den = la * lb * lc + dot(a, b) * lc + dot(a, c) * lb + dot(b, c) * la;
    2.0 * num.atan2(den)
}

fn angle_between(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (norm3(a) * norm3(b));
    d.clamp(-1.0, 1.0).acos()
}

/// Degree in 3D from the solid angle of the image of the box surface.
fn degree3(p: &Displacement, b: &CoordBox, n: usize) -> Result<i32, DegErr> {
    let m = ((n as f64 / 6.0).sqrt().ceil() as usize).max(2);
    let mut total = 0.0;
    // each face: fixed axis, fixed side, two free axes ordered for an outward normal
    for axis in 0..3 {
        for side in 0..2 {
            let (u, w) = match axis {
                0 => (1, 2),
                1 => (2, 0),
                _ => (0, 1),
            };
            let (u, w) = if side == 1 { (u, w) } else { (w, u) };
            let fixed = if side == 1 { b.hi[axis] } else { b.lo[axis] };
            let point = |su: f64, sw: f64| -> [f64; 3] {
                let mut c = [0.0; 3];
                c[axis] = fixed;
                c[u] = b.lo[u] + (b.hi[u] - b.lo[u]) * su;
                c[w] = b.lo[w] + (b.hi[w] - b.lo[w]) * sw;
                c
            };
            for i in 0..m {
                for j in 0..m {
                    let (u0, u1) = (i as f64 / m as f64, (i + 1) as f64 / m as f64);
                    let (w0, w1) = (j as f64 / m as f64, (j + 1) as f64 / m as f64);
                    let q = [[u0, w0], [u1, w0], [u1, w1], [u0, w1]];
                    total += tri_angle(p, &point, q[0], q[1], q[2], 0)?;
                    total += tri_angle(p, &point, q[0], q[2], q[3], 0)?;
                }
            }
        }
    }
    Ok((total / (4.0 * PI)).round() as i32)
}

fn tri_angle(
    p: &Displacement,
    point: &dyn Fn(f64, f64) -> [f64; 3],
    a: [f64; 2],
    b: [f64; 2],
    c: [f64; 2],
    depth: usize,
) -> Result<f64, DegErr> {
    let ev = |q: [f64; 2]| -> Result<[f64; 3], DegErr> {
        let v = p.eval(point(q[0], q[1]));
        if norm3(v) < 1e-12 {
            return Err(DegErr::ZeroOnBoundary);
        }
        Ok(v)
    };
    let (pa, pb, pc) = (ev(a)?, ev(b)?, ev(c)?);
    let spread = angle_between(pa, pb).max(angle_between(pb, pc)).max(angle_between(pa, pc));
    if spread <= PI / 4.0 {
        return Ok(solid_angle(pa, pb, pc));
    }
    if depth > 12 {
        return Err(DegErr::Unresolved);
    }
    let mid = |x: [f64; 2], y: [f64; 2]| [0.5 * (x[0] + y[0]), 0.5 * (x[1] + y[1])];
    let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
    Ok(tri_angle(p, point, a, ab, ca, depth + 1)?
        + tri_angle(p, point, ab, b, bc, depth + 1)?
        + tri_angle(p, point, ca, bc, c, depth + 1)?
        + tri_angle(p, point, ab, bc, ca, depth + 1)?)
}

fn box_degree(p: &Displacement, b: &CoordBox) -> Result<i32, DegErr> {
    if p.s == 1 {
        winding(p, b, 1 << 10)
    } else {
        degree3(p, b, 1 << 10)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub t: f64,
    pub v: [f64; 2],
    pub residual: f64,
    pub initial_degree: i32,
    pub subdivisions: usize,
    /// Boxes where the parent degree differed from the sum over children.
    pub additivity_failures: usize,
}

fn initial_box(dom: &BoxDomain) -> CoordBox {
    CoordBox { lo: [dom.a, -1.0, if dom.s == 2 { -1.0 } else { 0.0 }], hi: [dom.b, 1.0, if dom.s == 2 { 1.0 } else { 0.0 }] }
}

/// Degree of `id - H` on the boundary of the whole domain.
pub fn domain_degree(h: &MapFn, dom: &BoxDomain) -> PhResult<i32> {
    let p = Displacement { h, s: dom.s };
    let mut b = initial_box(dom);
    for _ in 0..4 {
        match box_degree(&p, &b) {
            Ok(d) => return Ok(d),
            Err(DegErr::ZeroOnBoundary) => {
                // inflate by 1% in t; the disk factor is fixed
                let w = 0.005 * (b.hi[0] - b.lo[0]);
                b.lo[0] -= w;
                b.hi[0] += w;
            }
            Err(DegErr::Unresolved) => return Err(PhError::BudgetExhausted),
        }
    }
    Err(PhError::DegreeZeroUnexpected)
}

fn newton_polish(p: &Displacement, c: [f64; 3], b: &CoordBox) -> Option<[f64; 3]> {
    let dims = p.s + 1;
    let mut x = c;
    for _ in 0..40 {
        let r = p.eval(x);
        if norm3(r) < 1e-15 {
            break;
        }
        let mut j = nalgebra::Matrix3::<f64>::identity();
        let e = 1e-8;
        for k in 0..dims {
            let mut xp = x;
            let mut xm = x;
            xp[k] += e;
            xm[k] -= e;
            let (rp, rm) = (p.eval(xp), p.eval(xm));
            for i in 0..dims {
                j[(i, k)] = (rp[i] - rm[i]) / (2.0 * e);
            }
        }
        let rv = nalgebra::Vector3::new(r[0], r[1], if dims == 3 { r[2] } else { 0.0 });
        let step = j.lu().solve(&rv)?;
        for k in 0..dims {
            x[k] -= step[k];
        }
        // stay near the box (the polish is local)
        let slack = 2.0 * b.diameter(p.s) + 1e-9;
        for k in 0..dims {
            if x[k] < b.lo[k] - slack || x[k] > b.hi[k] + slack {
                return None;
            }
        }
    }
    Some(x)
}

/// Fixed point of `H` inside `[a,b] x D^s` with `||H(p) - p|| < tol`.
pub fn degree_fixed_point(h: &MapFn, dom: &BoxDomain, tol: f64) -> PhResult<FixedPoint> {
    let report = boundary_hypotheses_check(h, dom, 256, 0.0);
    if !report.pass {
        return Err(PhError::HypothesisViolation(format!(
            "boundary slacks h2={:.3e} a={:.3e} b={:.3e}",
            report.slack_h2, report.slack_a, report.slack_b
        )));
    }
    let p = Displacement { h, s: dom.s };
    let initial_degree = domain_degree(h, dom)?;
    if initial_degree == 0 {
        return Err(PhError::DegreeZeroUnexpected);
    }
    if initial_degree != 1 {
        return Err(PhError::HypothesisViolation(format!("boundary degree {initial_degree}")));
    }
    let mut b = initial_box(dom);
    let mut deg = initial_degree;
    let mut subdivisions = 0;
    let mut additivity_failures = 0;
    let residual_of = |x: [f64; 3]| -> f64 { norm3(p.eval(x)) };
    for _ in 0..200 {
        if let Some(x) = newton_polish(&p, b.center(), &b) {
            let inside = x[0] >= dom.a - 1e-12 && x[0] <= dom.b + 1e-12 && x[1].abs() <= 1.0 + 1e-12 && x[2].abs() <= 1.0 + 1e-12;
            if inside && residual_of(x) < tol {
                return Ok(finish(&p, x, initial_degree, subdivisions, additivity_failures));
            }
        }
        if b.diameter(dom.s) < 1e-3 * tol {
            break;
        }
        // split the longest side; try a few cut ratios if a zero lands on the cut
        let axis = (0..=dom.s).max_by(|&i, &j| (b.hi[i] - b.lo[i]).partial_cmp(&(b.hi[j] - b.lo[j])).unwrap()).unwrap();
        let mut chosen = None;
        for ratio in [0.5, 0.47, 0.53, 0.41] {
            let cut = b.lo[axis] + ratio * (b.hi[axis] - b.lo[axis]);
            let mut l = b;
            let mut r = b;
            l.hi[axis] = cut;
            r.lo[axis] = cut;
            match (box_degree(&p, &l), box_degree(&p, &r)) {
                (Ok(dl), Ok(dr)) => {
                    if dl + dr != deg {
                        additivity_failures += 1;
                    }
                    chosen = Some(if dl != 0 { (l, dl) } else { (r, dr) });
                    if dl == 0 && dr == 0 {
                        chosen = None;
                        continue;
                    }
                    break;
                }
                (Err(DegErr::ZeroOnBoundary), _) | (_, Err(DegErr::ZeroOnBoundary)) => {
                    // a zero on the cut is a fixed point
                    let mut probe = b.center();
                    probe[axis] = cut;
                    if let Some(x) = newton_polish(&p, probe, &b) {
                        if residual_of(x) < tol {
                            return Ok(finish(&p, x, initial_degree, subdivisions, additivity_failures));
                        }
                    }
                    continue;
                }
                _ => return Err(PhError::BudgetExhausted),
            }
        }
        let (nb, nd) = chosen.ok_or(PhError::DegreeZeroUnexpected)?;
        b = nb;
        deg = nd;
        subdivisions += 1;
    }
    let x = b.center();
    if residual_of(x) < tol {
        return Ok(finish(&p, x, initial_degree, subdivisions, additivity_failures));
    }
    Err(PhError::BudgetExhausted)
}

fn finish(p: &Displacement, x: [f64; 3], initial_degree: i32, subdivisions: usize, additivity_failures: usize) -> FixedPoint {
    let v = p.v_of(x);
    // residual re-evaluated on H itself
    let (h1, h2) = (p.h)(x[0], v);
    let residual = ((h1 - x[0]).powi(2) + (h2[0] - v[0]).powi(2) + (h2[1] - v[1]).powi(2)).sqrt();
    FixedPoint { t: x[0], v, residual, initial_degree, subdivisions, additivity_failures }
}

/// Seeded random map satisfying the boundary hypotheses by construction:
/// `h1 = t + alpha (m - t) + beta w(t) sin(...)` with `w` vanishing at the
/// ends, and `h2 = 0.95 g / sqrt(1 + |g|^2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleMap {
    pub dom: BoxDomain,
    pub m: f64,
    pub alpha: f64,
    pub beta: f64,
    pub freq: [f64; 3],
    pub lin: [[f64; 2]; 2],
    pub shift: [f64; 2],
    pub wave: [f64; 3],
}

impl AdmissibleMap {
    pub fn random(dom: BoxDomain, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = dom.a + (dom.b - dom.a) * rng.gen_range(0.2..0.8);
        Self {
            dom,
            m,
            alpha: rng.gen_range(0.2..1.8),
            beta: rng.gen_range(0.0..1.5),
            freq: [rng.gen_range(-6.0..6.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)],
            lin: [[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)], [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]],
            shift: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            wave: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..6.0)],
        }
    }

    pub fn eval(&self, t: f64, v: [f64; 2]) -> (f64, [f64; 2]) {
        let (a, b) = (self.dom.a, self.dom.b);
        let w = (t - a) * (b - t) / ((b - a) * (b - a) / 4.0);
        let phase = self.freq[0] * t + self.freq[1] * v[0] + self.freq[2] * v[1];
        let h1 = t + self.alpha * (self.m - t) + self.beta * w * (b - a) * phase.sin() * 0.5;
        let mut g = [
            self.lin[0][0] * v[0] + self.lin[0][1] * v[1] + self.shift[0] + self.wave[0] * (self.wave[2] * t).sin(),
            self.lin[1][0] * v[0] + self.lin[1][1] * v[1] + self.shift[1] + self.wave[1] * (self.wave[2] * t).cos(),
        ];
        if self.dom.s == 1 {
            g[1] = 0.0;
        }
        let n = (1.0 + g[0] * g[0] + g[1] * g[1]).sqrt();
        (h1, [0.95 * g[0] / n, 0.95 * g[1] / n])
    }
}
