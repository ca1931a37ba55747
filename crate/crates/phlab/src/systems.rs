//! Catalog of partially hyperbolic maps on `T^3` with the cat map
//! `A = [[2,1],[1,1]]` on the base and a circle map on the fiber.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{PhError, PhResult};
use crate::geometry::{log_map, wrap01, Mat3, Point3, Vec3};

pub const CAT: [[f64; 2]; 2] = [[2.0, 1.0], [1.0, 1.0]];
pub const CAT_INV: [[f64; 2]; 2] = [[1.0, -1.0], [-1.0, 2.0]];

/// Unstable eigenvalue of the cat map, `(3+sqrt 5)/2`.
pub fn lambda_u() -> f64 {
    (3.0 + 5f64.sqrt()) / 2.0
}

/// Stable eigenvalue of the cat map, `(3-sqrt 5)/2`.
pub fn lambda_s() -> f64 {
    (3.0 - 5f64.sqrt()) / 2.0
}

pub fn default_omega() -> f64 {
    2f64.sqrt() - 1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    Product,
    Skew,
    Reversing,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// `sin(2 pi x)` of the first base coordinate.
    #[default]
    SinX,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSpec {
    pub id: SystemId,
    #[serde(default = "default_omega")]
    pub omega: f64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub phase: Phase,
    /// The map is the `power`-th iterate of the elementary step.
    #[serde(default = "one")]
    pub power: u32,
}

fn one() -> u32 {
    1
}

impl MapSpec {
    pub fn product() -> Self {
        Self { id: SystemId::Product, omega: default_omega(), epsilon: 0.0, phase: Phase::SinX, power: 1 }
    }

    pub fn skew(epsilon: f64) -> Self {
        Self { id: SystemId::Skew, omega: default_omega(), epsilon, phase: Phase::SinX, power: 1 }
    }

    pub fn reversing() -> Self {
        Self { id: SystemId::Reversing, omega: default_omega(), epsilon: 0.0, phase: Phase::SinX, power: 1 }
    }

    /// Same system iterated `m` times.
    pub fn powered(mut self, m: u32) -> Self {
        self.power *= m;
        self
    }

    pub fn validate(&self) -> PhResult<()> {
        if self.power == 0 || self.power > 8 {
            return Err(PhError::ConfigInvalid(format!("power {} outside 1..=8", self.power)));
        }
        if !(0.0..1.0).contains(&self.omega) {
            return Err(PhError::ConfigInvalid(format!("omega {} outside [0,1)", self.omega)));
        }
        if !self.epsilon.is_finite() {
            return Err(PhError::ConfigInvalid("epsilon must be finite".into()));
        }
        if self.id == SystemId::Product && self.epsilon != 0.0 {
            return Err(PhError::ConfigInvalid("product system has no epsilon".into()));
        }
        Ok(())
    }

    pub fn instance(&self) -> SystemInstance {
        SystemInstance::new(*self)
    }
}

/// The catalog: product, skew (epsilon = 0.05) and reversing.
pub fn catalog() -> Vec<MapSpec> {
    vec![MapSpec::product(), MapSpec::skew(0.05), MapSpec::reversing()]
}

/// A concrete map `f(x,y,t) = (A(x,y) mod 1, sign*t + omega + eps*sin(2 pi x))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemInstance {
    pub spec: MapSpec,
    pub volume_preserving: bool,
}

impl SystemInstance {
    pub fn new(spec: MapSpec) -> Self {
        Self { spec, volume_preserving: true }
    }

    fn step_sign(&self) -> f64 {
        match self.spec.id {
            SystemId::Reversing => -1.0,
            _ => 1.0,
        }
    }

    /// `+1` when the fiber map preserves orientation, `-1` otherwise.
    pub fn fiber_sign(&self) -> f64 {
        self.step_sign().powi(self.spec.power as i32)
    }

    fn eps(&self) -> f64 {
        match self.spec.id {
            SystemId::Product => 0.0,
            _ => self.spec.epsilon,
        }
    }

    fn phase(&self, x: f64) -> f64 {
        match self.spec.phase {
            Phase::SinX => (2.0 * PI * x).sin(),
        }
    }

    fn phase_deriv(&self, x: f64) -> f64 {
        match self.spec.phase {
            Phase::SinX => 2.0 * PI * (2.0 * PI * x).cos(),
        }
    }

    fn step_lift(&self, v: &Vec3) -> Vec3 {
        let (x, y, t) = (v[0], v[1], v[2]);
        Vec3::new(
            CAT[0][0] * x + CAT[0][1] * y,
            CAT[1][0] * x + CAT[1][1] * y,
            self.step_sign() * t + self.spec.omega + self.eps() * self.phase(x),
        )
    }

    /// Image of a lifted point in `R^3` without reduction mod 1.
    pub fn eval_lift(&self, v: &Vec3) -> Vec3 {
        let mut w = self.step_lift(v);
        for _ in 1..self.spec.power {
            w = self.step_lift(&w);
        }
        w
    }

    pub fn eval(&self, p: &Point3) -> Point3 {
        Point3::new(self.eval_lift(&p.coords))
    }

    pub fn iterate(&self, p: &Point3, k: usize) -> Point3 {
        let mut q = *p;
        for _ in 0..k {
            q = self.eval(&q);
        }
        q
    }

    fn step_jacobian(&self, x: f64) -> Mat3 {
        Mat3::new(
            CAT[0][0], CAT[0][1], 0.0,
            CAT[1][0], CAT[1][1], 0.0,
            self.eps() * self.phase_deriv(x), 0.0, self.step_sign(),
        )
    }

    pub fn jacobian(&self, p: &Point3) -> Mat3 {
        let mut v = p.coords;
        let mut m = Mat3::identity();
        for _ in 0..self.spec.power {
            m = self.step_jacobian(v[0]) * m;
            v = self.step_lift(&v);
        }
        m
    }

    /// `Df^k(p)` along the forward orbit.
    pub fn jacobian_iter(&self, p: &Point3, k: usize) -> Mat3 {
        let mut m = Mat3::identity();
        let mut q = *p;
        for _ in 0..k {
            m = self.jacobian(&q) * m;
            q = self.eval(&q);
        }
        m
    }

    fn step_inverse_lift(&self, v: &Vec3) -> Vec3 {
        let (x, y, t) = (v[0], v[1], v[2]);
        let xp = CAT_INV[0][0] * x + CAT_INV[0][1] * y;
        let yp = CAT_INV[1][0] * x + CAT_INV[1][1] * y;
        let tp = self.step_sign() * (t - self.spec.omega - self.eps() * self.phase(xp));
        Vec3::new(xp, yp, tp)
    }

    /// Closed-form inverse of a lifted point.
    pub fn inverse_lift(&self, v: &Vec3) -> Vec3 {
        let mut w = self.step_inverse_lift(v);
        for _ in 1..self.spec.power {
            w = self.step_inverse_lift(&w);
        }
        w
    }

    pub fn inverse(&self, p: &Point3) -> Point3 {
        Point3::new(self.inverse_lift(&p.coords))
    }

    pub fn inverse_iter(&self, p: &Point3, k: usize) -> Point3 {
        let mut q = *p;
        for _ in 0..k {
            q = self.inverse(&q);
        }
        q
    }

    /// Newton solve of `f(z) = y`, used as a cross-check of the closed form and
    /// as the fallback for maps without one.
    pub fn inverse_newton(&self, y: &Point3, guess: &Point3) -> PhResult<Point3> {
        let mut z = *guess;
        for _ in 0..50 {
            let r = log_map(y, &self.eval(&z));
            if r.norm() < 1e-14 {
                return Ok(z);
            }
            let j = self.jacobian(&z);
            let step = j.lu().solve(&r).ok_or(PhError::NoClosedForm)?;
            z = Point3::new(z.coords - step);
        }
        let r = log_map(y, &self.eval(&z)).norm();
        if r < 1e-12 {
            Ok(z)
        } else {
            Err(PhError::NoClosedForm)
        }
    }
}

/// `A^k` as integers.
pub fn cat_power(k: usize) -> [[i64; 2]; 2] {
    let mut m = [[1i64, 0], [0, 1]];
    for _ in 0..k {
        m = [
            [2 * m[0][0] + m[1][0], 2 * m[0][1] + m[1][1]],
            [m[0][0] + m[1][0], m[0][1] + m[1][1]],
        ];
    }
    m
}

/// All base points fixed by `A^k` (period dividing `k`), sorted.
pub fn base_periodic_points(k: usize) -> PhResult<Vec<[f64; 2]>> {
    if k == 0 || k > 12 {
        return Err(PhError::ConfigInvalid(format!("base period {k} outside 1..=12")));
    }
    let a = cat_power(k);
    let m = [[a[0][0] - 1, a[0][1]], [a[1][0], a[1][1] - 1]];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    // image of the unit square under M
    let lo0 = m[0][0].min(0) + m[0][1].min(0);
    let hi0 = m[0][0].max(0) + m[0][1].max(0);
    let lo1 = m[1][0].min(0) + m[1][1].min(0);
    let hi1 = m[1][0].max(0) + m[1][1].max(0);
    let mut out = Vec::with_capacity(det.unsigned_abs() as usize);
    for n0 in lo0..=hi0 {
        for n1 in lo1..=hi1 {
            // b = M^{-1} n with exact integer numerators
            let p0 = m[1][1] * n0 - m[0][1] * n1;
            let p1 = -m[1][0] * n0 + m[0][0] * n1;
            let (p0, p1, d) = if det < 0 { (-p0, -p1, -det) } else { (p0, p1, det) };
            if (0..d).contains(&p0) && (0..d).contains(&p1) {
                out.push([p0 as f64 / d as f64, p1 as f64 / d as f64]);
            }
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

/// Smallest `k >= 1` with `A^k b = b`, searched up to `k_max`.
pub fn minimal_base_period(b: [f64; 2], k_max: usize) -> Option<usize> {
    let mut q = b;
    for k in 1..=k_max {
        q = [wrap01(2.0 * q[0] + q[1]), wrap01(q[0] + q[1])];
        let d0 = crate::geometry::wrap_signed(q[0] - b[0]);
        let d1 = crate::geometry::wrap_signed(q[1] - b[1]);
        if d0.abs() < 1e-9 && d1.abs() < 1e-9 {
            return Some(k);
        }
    }
    None
}

/// Fiber image of `t` over a base point, used by closed-form oracles.
pub fn fiber_image(f: &SystemInstance, x: f64, t: f64) -> f64 {
    wrap01(f.eval_lift(&Vec3::new(x, 0.0, t))[2])
}
