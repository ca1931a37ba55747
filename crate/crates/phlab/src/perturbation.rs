//! Vector fields on `T^3`, their RK4 time-`tau` maps, transversality
//! certification, bump fields, transverse cycles and divergence-free tube fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{PhError, PhResult};
use crate::geometry::{log_map, wrap_signed, Mat3, Point3, Vec3};
use crate::invariant_manifolds::{center_curve_window, CenterCurve};
use crate::splitting::{estimate_splitting, DEFAULT_DEPTH};
use crate::systems::SystemInstance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransversalityClass {
    PositiveGlobal,
    PositiveOnSupport,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldRule {
    /// Constant field `v`.
    Constant { v: [f64; 3] },
    /// `(alpha cos 2 pi t, alpha sin 2 pi t, 1)`, divergence free.
    Tilted { alpha: f64 },
    /// `2 b1 plateau(|log_center z| / eps0) axis`, supported in `B(center, 3 eps0)`.
    Bump { center: [f64; 3], axis: [f64; 3], eps0: f64, b1: f64 },
    /// `phi(rho^2 / r^2) u` around the closed geodesic through `base` with
    /// integer direction `direction`; `rho` is the distance to the core.
    Tube { base: [f64; 3], direction: [i32; 3], radius: f64 },
    Sum { children: Vec<VectorFieldSpec> },
    Scaled { factor: f64, child: Box<VectorFieldSpec> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VectorFieldSpec {
    pub rule: FieldRule,
    pub class: TransversalityClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Support {
    Global,
    Ball { center: [f64; 3], radius: f64 },
    Tube { base: [f64; 3], direction: [i32; 3], radius: f64 },
    Union { parts: Vec<Support> },
}

/// `exp(-1/s)` for `s > 0`.
fn psi(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else {
        (-1.0 / s).exp()
    }
}

/// Smooth step from 0 (at `s <= 0`) to 1 (at `s >= 1`).
pub fn smooth_step(s: f64) -> f64 {
    let a = psi(s);
    let b = psi(1.0 - s);
    a / (a + b)
}

/// `C^inf` plateau: 1 on `[0, a]`, 0 on `[b, inf)`.
pub fn plateau(r: f64, a: f64, b: f64) -> f64 {
    1.0 - smooth_step((r - a) / (b - a))
}

/// Tube profile: 1 on `[0, 1/3]`, 0 on `[2/3, 1]`.
pub fn tube_profile(s: f64) -> f64 {
    plateau(s, 1.0 / 3.0, 2.0 / 3.0)
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn dir_unit(d: [i32; 3]) -> Vec3 {
    Vec3::new(d[0] as f64, d[1] as f64, d[2] as f64).normalize()
}

/// Squared distance from `p` to the closed geodesic through `base` along `d`.
fn core_distance_sq(p: &Point3, base: [f64; 3], d: [i32; 3]) -> f64 {
    let u = dir_unit(d);
    let w = log_map(&Point3::new(v3(base)), p);
    let nonzero = d.iter().filter(|c| **c != 0).count();
    if nonzero == 1 {
        // axis-aligned core: the wrapped transverse offset is already minimal
        return (w - u * w.dot(&u)).norm_squared();
    }
    let mut best = f64::INFINITY;
    for i in -1..=1 {
        for j in -1..=1 {
            for l in -1..=1 {
                let q = w + Vec3::new(i as f64, j as f64, l as f64);
                best = best.min((q - u * q.dot(&u)).norm_squared());
            }
        }
    }
    best
}

impl VectorFieldSpec {
    pub fn constant(v: [f64; 3]) -> Self {
        let class = if v[2] > 0.0 && v[0] == 0.0 && v[1] == 0.0 {
            TransversalityClass::PositiveGlobal
        } else {
            TransversalityClass::None
        };
        Self { rule: FieldRule::Constant { v }, class }
    }

    /// `d/dtheta`.
    pub fn vertical() -> Self {
        Self::constant([0.0, 0.0, 1.0])
    }

    pub fn tilted(alpha: f64) -> Self {
        Self { rule: FieldRule::Tilted { alpha }, class: TransversalityClass::PositiveGlobal }
    }

    /// Same field scaled by `s > 0`.
    pub fn scaled(&self, s: f64) -> Self {
        let rule = match &self.rule {
            FieldRule::Constant { v } => FieldRule::Constant { v: [v[0] * s, v[1] * s, v[2] * s] },
            FieldRule::Bump { center, axis, eps0, b1 } => FieldRule::Bump { center: *center, axis: *axis, eps0: *eps0, b1: b1 * s },
            _ => FieldRule::Scaled { factor: s, child: Box::new(self.clone()) },
        };
        Self { rule, class: self.class }
    }

    pub fn eval(&self, p: &Point3) -> Vec3 {
        match &self.rule {
            FieldRule::Constant { v } => v3(*v),
            FieldRule::Tilted { alpha } => {
                let th = 2.0 * PI * p.coords[2];
                Vec3::new(alpha * th.cos(), alpha * th.sin(), 1.0)
            }
            FieldRule::Bump { center, axis, eps0, b1 } => {
                let r = log_map(&Point3::new(v3(*center)), p).norm() / eps0;
                if r >= 3.0 {
                    Vec3::zeros()
                } else {
                    v3(*axis) * (2.0 * b1 * plateau(r, 2.0, 3.0))
                }
            }
            FieldRule::Tube { base, direction, radius } => {
                let s = core_distance_sq(p, *base, *direction) / (radius * radius);
                if s >= 2.0 / 3.0 {
                    Vec3::zeros()
                } else {
                    dir_unit(*direction) * tube_profile(s)
                }
            }
            FieldRule::Sum { children } => children.iter().map(|c| c.eval(p)).sum(),
            FieldRule::Scaled { factor, child } => child.eval(p) * *factor,
        }
    }

    pub fn support(&self) -> Support {
        match &self.rule {
            FieldRule::Constant { .. } | FieldRule::Tilted { .. } => Support::Global,
            FieldRule::Bump { center, eps0, .. } => Support::Ball { center: *center, radius: 3.0 * eps0 },
            FieldRule::Tube { base, direction, radius } => Support::Tube {
                base: *base,
                direction: *direction,
                // profile vanishes for rho^2 >= 2/3 r^2
                radius: radius * (2.0f64 / 3.0).sqrt(),
            },
            FieldRule::Scaled { child, .. } => child.support(),
            FieldRule::Sum { children } => {
                let parts: Vec<Support> = children.iter().map(|c| c.support()).collect();
                if parts.iter().any(|p| matches!(p, Support::Global)) {
                    Support::Global
                } else {
                    Support::Union { parts }
                }
            }
        }
    }

    /// Sup norm estimate (exact for the analytic rules).
    pub fn sup_norm(&self) -> f64 {
        match &self.rule {
            FieldRule::Constant { v } => v3(*v).norm(),
            FieldRule::Tilted { alpha } => (1.0 + alpha * alpha).sqrt(),
            FieldRule::Bump { axis, b1, .. } => 2.0 * b1 * v3(*axis).norm(),
            FieldRule::Tube { .. } => 1.0,
            FieldRule::Scaled { factor, child } => factor.abs() * child.sup_norm(),
            FieldRule::Sum { .. } => {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                (0..4096)
                    .map(|_| self.eval(&Point3::xyz(rng.gen(), rng.gen(), rng.gen())).norm())
                    .fold(0.0, f64::max)
            }
        }
    }
}

impl Support {
    pub fn contains(&self, p: &Point3) -> bool {
        match self {
            Support::Global => true,
            Support::Ball { center, radius } => log_map(&Point3::new(v3(*center)), p).norm() < *radius,
            Support::Tube { base, direction, radius } => core_distance_sq(p, *base, *direction) < radius * radius,
            Support::Union { parts } => parts.iter().any(|s| s.contains(p)),
        }
    }

    /// A random point of the support (rejection-free for balls and tubes).
    fn sample(&self, rng: &mut ChaCha8Rng) -> Point3 {
        match self {
            Support::Global => Point3::xyz(rng.gen(), rng.gen(), rng.gen()),
            Support::Ball { center, radius } => loop {
                let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if v.norm() < 1.0 {
                    return Point3::new(v3(*center) + v * *radius);
                }
            },
            Support::Tube { base, direction, radius } => {
                let u = dir_unit(*direction);
                let a = if u.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
                let e1 = (a - u * a.dot(&u)).normalize();
                let e2 = u.cross(&e1);
                let r = radius * rng.gen::<f64>().sqrt();
                let phi = 2.0 * PI * rng.gen::<f64>();
                let len = Vec3::new(direction[0] as f64, direction[1] as f64, direction[2] as f64).norm();
                Point3::new(v3(*base) + u * (len * rng.gen::<f64>()) + e1 * (r * phi.cos()) + e2 * (r * phi.sin()))
            }
            Support::Union { parts } => {
                let i = rng.gen_range(0..parts.len());
                parts[i].sample(rng)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub tau: f64,
    pub steps: usize,
}

impl FlowParams {
    /// `h = min(1e-3, |tau|/4)` rounded so that `|tau|/h` is an integer `>= 4`.
    pub fn for_tau(tau: f64) -> Self {
        let steps = ((tau.abs() / 1e-3).ceil() as usize).max(4);
        Self { tau, steps }
    }

    pub fn h(&self) -> f64 {
        self.tau / self.steps as f64
    }
}

/// RK4 on the lift; the result is reduced mod 1.
pub fn flow_lift(x: &VectorFieldSpec, tau: f64, v: &Vec3, params: FlowParams) -> Vec3 {
    if tau == 0.0 {
        return *v;
    }
    let h = tau / params.steps as f64;
    let field = |w: &Vec3| x.eval(&Point3::new(*w));
    let mut w = *v;
    for _ in 0..params.steps {
        let k1 = field(&w);
        let k2 = field(&(w + k1 * (h / 2.0)));
        let k3 = field(&(w + k2 * (h / 2.0)));
        let k4 = field(&(w + k3 * h));
        w += (k1 + 2.0 * k2 + 2.0 * k3 + k4) * (h / 6.0);
    }
    w
}

/// `X_tau(p)` with the default step rule.
pub fn flow(x: &VectorFieldSpec, tau: f64, p: &Point3) -> Point3 {
    Point3::new(flow_lift(x, tau, &p.coords, FlowParams::for_tau(tau)))
}

pub fn flow_with(x: &VectorFieldSpec, tau: f64, p: &Point3, params: FlowParams) -> Point3 {
    Point3::new(flow_lift(x, tau, &p.coords, params))
}

/// Perturbed map `X_tau o f`.
pub fn perturbed_eval(f: &SystemInstance, x: &VectorFieldSpec, tau: f64, p: &Point3) -> Point3 {
    flow(x, tau, &f.eval(p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransversalityReport {
    /// Smallest center component of `X` at samples where `X != 0`.
    pub min_margin: f64,
    /// Largest `(|X^s| + |X^u|) / X^c` at samples where `X != 0`.
    pub max_angle_ratio: f64,
    pub violations: usize,
    pub samples: usize,
    pub class_holds: bool,
}

/// Center coordinates of `X` in the local splitting, sampled half uniformly on
/// the torus and half on the declared support.
pub fn transversality_report(
    f: &SystemInstance,
    x: &VectorFieldSpec,
    samples: usize,
    seed: u64,
) -> PhResult<TransversalityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let support = x.support();
    let mut min_margin = f64::INFINITY;
    let mut max_ratio: f64 = 0.0;
    let mut violations = 0;
    for i in 0..samples {
        let p = if i % 2 == 0 { Point3::xyz(rng.gen(), rng.gen(), rng.gen()) } else { support.sample(&mut rng) };
        let v = x.eval(&p);
        let nonzero = v.norm() > 0.0;
        if !nonzero {
            if x.class == TransversalityClass::PositiveGlobal {
                violations += 1;
            }
            if support.contains(&p) {
                continue;
            }
            continue;
        }
        if !support.contains(&p) {
            violations += 1;
        }
        let fr = estimate_splitting(f, &p, DEFAULT_DEPTH).map_err(|_| PhError::OrientationUndefined)?;
        let c = fr.decompose(&v);
        let xc = c[1];
        let side = (fr.es_vec() * c[0]).norm() + (fr.eu_vec() * c[2]).norm();
        min_margin = min_margin.min(xc);
        if xc > 1e-9 * v.norm() {
            max_ratio = max_ratio.max(side / xc);
        } else {
            violations += 1;
            max_ratio = f64::INFINITY;
        }
    }
    let class_holds = match x.class {
        TransversalityClass::None => true,
        _ => violations == 0,
    };
    Ok(TransversalityReport { min_margin, max_angle_ratio: max_ratio, violations, samples, class_holds })
}

/// Bump field around `x` along the center direction, with `||X^c|| = 2 b1` on
/// `B(x, 2 eps0)` and support in `B(x, 3 eps0)`.
pub fn build_bump_field(f: &SystemInstance, x: &Point3, eps0: f64, b1: f64) -> PhResult<VectorFieldSpec> {
    if !(eps0 > 0.0) || 5.0 * eps0 >= 0.5 {
        return Err(PhError::ChartTooSmall);
    }
    let ec = estimate_splitting(f, x, DEFAULT_DEPTH)?.ec;
    Ok(VectorFieldSpec {
        rule: FieldRule::Bump { center: [x.coords[0], x.coords[1], x.coords[2]], axis: [ec[0], ec[1], ec[2]], eps0, b1 },
        class: TransversalityClass::PositiveOnSupport,
    })
}

/// Closed curve through `x` with tangent positively transverse to `E^s+E^u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransverseCycle {
    /// Lifted samples; the last sample equals the first plus `shift`.
    pub points: Vec<Vec3>,
    pub shift: Vec3,
    /// Smallest center component of the unit tangent.
    pub tangent_margin: f64,
    /// `(base, direction)` when the cycle is a closed straight geodesic.
    pub straight: Option<([f64; 3], [i32; 3])>,
}

fn straight_core(c: &CenterCurve) -> Option<([f64; 3], [i32; 3])> {
    let cl = c.closure?;
    let d = cl.shift;
    let di = [d[0] as i32, d[1] as i32, d[2] as i32];
    let u = d.normalize();
    let p0 = c.points[0];
    let ok = c.points.iter().all(|p| {
        let w = p - p0;
        (w - u * w.dot(&u)).norm() < 1e-9
    });
    ok.then(|| ([p0[0], p0[1], p0[2]], di))
}

/// Center curve through `x` closed up directly or by a Hermite bridge whose
/// tangent keeps a positive center component.
pub fn build_transverse_cycle(f: &SystemInstance, x: &Point3) -> PhResult<TransverseCycle> {
    if f.fiber_sign() < 0.0 {
        return Err(PhError::OrientationViolation);
    }
    let step = 1.0 / 128.0;
    let half = 1.5;
    let c = center_curve_window(f, x, half, 1, step)?;
    let zero = c.params.iter().position(|t| t.abs() < 0.5 * step).unwrap();
    let margin_of = |pts: &[Vec3]| -> PhResult<f64> {
        let mut m = f64::INFINITY;
        for w in pts.windows(2) {
            let d = (w[1] - w[0]).normalize();
            let ec = estimate_splitting(f, &Point3::new(0.5 * (w[0] + w[1])), DEFAULT_DEPTH)?.ec;
            m = m.min(d.dot(&ec));
        }
        Ok(m)
    };
    if let Some(cl) = c.closure {
        let n = ((cl.length / step).round() as usize).max(8);
        let points: Vec<Vec3> = (0..=n).map(|i| c.lifted_at(cl.length * i as f64 / n as f64)).collect();
        let tangent_margin = margin_of(&points)?;
        let straight = straight_core(&c);
        check_embedded(&points)?;
        return Ok(TransverseCycle { points, shift: cl.shift, tangent_margin, straight });
    }
    // first near return of the forward half to x (mod Z^3)
    let start = c.points[zero];
    let mut best: Option<(usize, f64)> = None;
    for i in zero + (0.1 / step) as usize..c.points.len() {
        let d = (c.points[i] - start).map(wrap_signed).norm();
        if d < 0.05 && best.map_or(true, |(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    let (iend, _) = best.ok_or(PhError::NoClosingBridge)?;
    let p1 = c.points[iend];
    let shift = (p1 - start).map(|v| v.round());
    let p0 = start + shift;
    let t1 = c.tangent_at(c.params[iend]);
    let t0 = c.tangent_at(0.0);
    let len = (p0 - p1).norm().max(1e-3) * 2.0;
    let mut points: Vec<Vec3> = c.points[zero..=iend].to_vec();
    let m = 32;
    for j in 1..=m {
        let s = j as f64 / m as f64;
        let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
        let h10 = s.powi(3) - 2.0 * s * s + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
        let h11 = s.powi(3) - s * s;
        points.push(p1 * h00 + t1 * (len * h10) + p0 * h01 + t0 * (len * h11));
    }
    let tangent_margin = margin_of(&points)?;
    if !(tangent_margin > 0.0) {
        return Err(PhError::NoClosingBridge);
    }
    check_embedded(&points)?;
    Ok(TransverseCycle { points, shift, tangent_margin, straight: None })
}

fn check_embedded(points: &[Vec3]) -> PhResult<()> {
    let n = points.len() - 1;
    let arc: Vec<f64> = std::iter::once(0.0)
        .chain(points.windows(2).scan(0.0, |acc, w| {
            *acc += (w[1] - w[0]).norm();
            Some(*acc)
        }))
        .collect();
    let total = arc[n];
    for i in 0..n {
        for j in i + 1..n {
            let sep = (arc[j] - arc[i]).min(total - (arc[j] - arc[i]));
            if sep < 0.1 {
                continue;
            }
            if (points[j] - points[i]).map(wrap_signed).norm() < 0.02 {
                return Err(PhError::SelfIntersection);
            }
        }
    }
    Ok(())
}

/// Divergence-free field `phi(rho^2/r^2) u` in a tube of radius `r` around a
/// straight transverse cycle.
pub fn build_tube_field(f: &SystemInstance, cycle: &TransverseCycle, radius: f64) -> PhResult<VectorFieldSpec> {
    let (base, direction) = cycle
        .straight
        .ok_or_else(|| PhError::HypothesisViolation("tube fields need a straight closed core".into()))?;
    // distinct lifts of the core must stay 2r apart
    let u = dir_unit(direction);
    let mut gap = f64::INFINITY;
    for i in -2i32..=2 {
        for j in -2i32..=2 {
            for l in -2i32..=2 {
                let m = Vec3::new(i as f64, j as f64, l as f64);
                let tr = (m - u * m.dot(&u)).norm();
                if tr > 1e-9 {
                    gap = gap.min(tr);
                }
            }
        }
    }
    if 2.0 * radius >= gap {
        return Err(PhError::TubeOverlap);
    }
    let ec = estimate_splitting(f, &Point3::new(v3(base)), DEFAULT_DEPTH)?.ec;
    if u.dot(&ec) <= 0.0 {
        return Err(PhError::NoClosingBridge);
    }
    Ok(VectorFieldSpec { rule: FieldRule::Tube { base, direction, radius }, class: TransversalityClass::PositiveOnSupport })
}

/// Central-difference divergence with step `h`.
pub fn divergence(x: &VectorFieldSpec, p: &Point3, h: f64) -> f64 {
    let mut d = 0.0;
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = h;
        let a = x.eval(&Point3::new(p.coords + e))[i];
        let b = x.eval(&Point3::new(p.coords - e))[i];
        d += (a - b) / (2.0 * h);
    }
    d
}

/// Sup of `|div X|` over an `n^3` grid.
pub fn max_divergence(x: &VectorFieldSpec, n: usize, h: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                let p = Point3::xyz(i as f64 / n as f64, j as f64 / n as f64, l as f64 / n as f64);
                worst = worst.max(divergence(x, &p, h).abs());
            }
        }
    }
    worst
}

/// Sum of positively transverse divergence-free fields covering the torus.
pub fn sum_to_global_field(f: &SystemInstance, fields: Vec<VectorFieldSpec>, grid: usize) -> PhResult<VectorFieldSpec> {
    if fields.len() == 1 && fields[0].class == TransversalityClass::PositiveGlobal {
        return Ok(fields.into_iter().next().unwrap());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for c in &fields {
        for _ in 0..64 {
            let p = Point3::xyz(rng.gen(), rng.gen(), rng.gen());
            let d = divergence(c, &p, 1e-4).abs();
            if d > 1e-6 {
                return Err(PhError::NotDivergenceFree(d));
            }
        }
    }
    let sum = VectorFieldSpec { rule: FieldRule::Sum { children: fields }, class: TransversalityClass::PositiveGlobal };
    let ec = |p: &Point3| estimate_splitting(f, p, DEFAULT_DEPTH).map(|fr| fr.ec);
    for i in 0..grid {
        for j in 0..grid {
            for l in 0..grid {
                let p = Point3::xyz(i as f64 / grid as f64, j as f64 / grid as f64, l as f64 / grid as f64);
                let FieldRule::Sum { children } = &sum.rule else { unreachable!() };
                if children.iter().all(|c| c.eval(&p).norm() == 0.0) {
                    return Err(PhError::CoverageGap);
                }
                if sum.eval(&p).dot(&ec(&p)?) <= 0.0 {
                    return Err(PhError::CoverageGap);
                }
            }
        }
    }
    Ok(sum)
}

/// Vertical tubes of radius `radius` over an `m x m` base grid.
pub fn vertical_tube_cover(f: &SystemInstance, m: usize, radius: f64) -> PhResult<Vec<VectorFieldSpec>> {
    let mut out = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let x = Point3::xyz(i as f64 / m as f64, j as f64 / m as f64, 0.0);
            let cyc = build_transverse_cycle(f, &x)?;
            out.push(build_tube_field(f, &cyc, radius)?);
        }
    }
    Ok(out)
}

/// Global divergence-free positively transverse field from vertical tubes.
pub fn global_divergence_free_field(f: &SystemInstance) -> PhResult<VectorFieldSpec> {
    let tubes = vertical_tube_cover(f, 5, 0.3)?;
    sum_to_global_field(f, tubes, 16)
}

/// Central-difference Jacobian of a map on the lift.
pub fn fd_jacobian(map: impl Fn(&Vec3) -> Vec3, v: &Vec3, h: f64) -> Mat3 {
    let mut j = Mat3::zeros();
    for i in 0..3 {
        let mut e = Vec3::zeros();
        e[i] = h;
        j.set_column(i, &((map(&(v + e)) - map(&(v - e))) / (2.0 * h)));
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::MapSpec;
    use approx::assert_abs_diff_eq;

    #[test]
    fn profile_shape() {
        assert_eq!(tube_profile(0.0), 1.0);
        assert_eq!(tube_profile(1.0 / 3.0), 1.0);
        assert_eq!(tube_profile(2.0 / 3.0), 0.0);
        assert_eq!(tube_profile(0.9), 0.0);
        let mut prev = 1.0;
        for i in 0..100 {
            let v = tube_profile(i as f64 / 99.0);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn constant_flow_exact() {
        let x = VectorFieldSpec::vertical();
        let p = Point3::xyz(0.1, 0.2, 0.3);
        assert_eq!(flow(&x, 0.0, &p), p);
        let q = flow(&x, 0.3, &p);
        assert_abs_diff_eq!(q.coords[2], 0.6, epsilon = 1e-15);
    }

    #[test]
    fn rk4_order() {
        let x = VectorFieldSpec::tilted(0.3);
        let p = Point3::xyz(0.1, 0.2, 0.3);
        let tau = 0.4;
        let reference = flow_lift(&x, tau, &p.coords, FlowParams { tau, steps: 4000 });
        let e1 = (flow_lift(&x, tau, &p.coords, FlowParams { tau, steps: 10 }) - reference).norm();
        let e2 = (flow_lift(&x, tau, &p.coords, FlowParams { tau, steps: 20 }) - reference).norm();
        let order = (e1 / e2).log2();
        assert!(order > 3.7 && order < 4.3, "order {order}");
    }

    #[test]
    fn transversality_cases() {
        let f = MapSpec::product().instance();
        let r = transversality_report(&f, &VectorFieldSpec::vertical(), 50, 1).unwrap();
        assert_abs_diff_eq!(r.min_margin, 1.0, epsilon = 1e-12);
        assert!(r.class_holds);
        let mut bad = VectorFieldSpec::constant([1.0, 0.0, 0.0]);
        bad.class = TransversalityClass::PositiveGlobal;
        let r = transversality_report(&f, &bad, 50, 1).unwrap();
        assert!(!r.class_holds);
    }

    #[test]
    fn bump_field_properties() {
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.4, 0.4, 0.4);
        let b = build_bump_field(&f, &x, 0.02, 0.5).unwrap();
        let r = transversality_report(&f, &b, 400, 2).unwrap();
        assert!(r.class_holds);
        assert!(r.min_margin > 0.0);
        // exact plateau along a ray
        for s in [0.0, 0.01, 0.039] {
            assert_abs_diff_eq!(b.eval(&Point3::xyz(0.4 + s, 0.4, 0.4))[2], 1.0, epsilon = 1e-12);
        }
        assert_eq!(b.eval(&Point3::xyz(0.46, 0.4, 0.4)).norm(), 0.0);
        assert!(matches!(build_bump_field(&f, &x, 0.2, 0.5), Err(PhError::ChartTooSmall)));
    }

    #[test]
    fn vertical_cycle_and_tube() {
        let f = MapSpec::skew(0.05).instance();
        let cyc = build_transverse_cycle(&f, &Point3::xyz(0.3, 0.7, 0.2)).unwrap();
        assert!(cyc.tangent_margin > 0.9);
        assert_eq!(cyc.straight.unwrap().1, [0, 0, 1]);
        let y = build_tube_field(&f, &cyc, 0.3).unwrap();
        assert!(y.eval(&Point3::xyz(0.3, 0.7, 0.9)).norm() > 0.0);
        assert_eq!(y.eval(&Point3::xyz(0.6, 0.7, 0.9)).norm(), 0.0);
        assert!(max_divergence(&y, 16, 1e-4) < 1e-6);
        assert!(matches!(build_tube_field(&f, &cyc, 0.6), Err(PhError::TubeOverlap)));
        let g = MapSpec::reversing().instance();
        assert!(build_transverse_cycle(&g, &Point3::origin()).is_err());
    }

    #[test]
    fn tube_flow_preserves_volume() {
        let f = MapSpec::product().instance();
        let cyc = build_transverse_cycle(&f, &Point3::xyz(0.5, 0.5, 0.0)).unwrap();
        let y = build_tube_field(&f, &cyc, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let v = Vec3::new(rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7), rng.gen());
            let j = fd_jacobian(|w| flow_lift(&y, 0.1, w, FlowParams::for_tau(0.1)), &v, 1e-5);
            assert_abs_diff_eq!(j.determinant(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn global_field_covers() {
        let f = MapSpec::skew(0.05).instance();
        let g = global_divergence_free_field(&f).unwrap();
        let r = transversality_report(&f, &g, 200, 9).unwrap();
        assert!(r.class_holds && r.min_margin >= 1.0 - 1e-12);
        let single = sum_to_global_field(&f, vec![VectorFieldSpec::vertical()], 4).unwrap();
        assert_eq!(single, VectorFieldSpec::vertical());
        let sparse = vertical_tube_cover(&f, 2, 0.2).unwrap();
        assert!(matches!(sum_to_global_field(&f, sparse, 8), Err(PhError::CoverageGap)));
    }
}
