//! Normal-bundle lift over a periodic center family: chart, lifted map,
//! invariant section, su-disk conjugacy, moving-forward gap and the local
//! domination inequalities.

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::center_curves::PeriodicCenterFamily;
use crate::error::{PhError, PhResult};
use crate::geometry::{exp_map, log_map, wrap_signed, Mat3, Point3, Vec3};
use crate::invariant_manifolds::{stable_graph, GraphOptions, LocalGraph};
use crate::perturbation::{flow_lift, FlowParams, VectorFieldSpec};
use crate::splitting::{estimate_splitting, one_step_rates, DEFAULT_DEPTH};
use crate::systems::SystemInstance;

/// Samples per closed leg for the chart and the section.
pub const SECTION_POINTS: usize = 256;
pub const DEFAULT_DELTA1: f64 = 0.1;
/// Largest tolerated angle between the chart planes and the true bundles.
pub const PLANE_ANGLE_BOUND: f64 = 1e-3;

/// Uniform parameter grid, periodic for closed legs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegGrid {
    pub x0: f64,
    pub h: f64,
    pub n: usize,
    pub period: Option<f64>,
}

impl LegGrid {
    pub fn t(&self, j: usize) -> f64 {
        self.x0 + self.h * j as f64
    }

    /// `a - b`, reduced to `(-L/2, L/2]` on periodic grids.
    pub fn diff(&self, a: f64, b: f64) -> f64 {
        match self.period {
            Some(l) => {
                let d = (a - b) / l;
                (d - d.round()) * l
            }
            None => a - b,
        }
    }

    /// Four-point Lagrange stencil: indices, weights and `d/dt` weights.
    fn stencil(&self, t: f64) -> ([usize; 4], [f64; 4], [f64; 4]) {
        let u = (t - self.x0) / self.h;
        let (j, fr) = match self.period {
            Some(_) => {
                let j = u.floor();
                (j as i64, u - j)
            }
            None => {
                let j = (u.floor() as i64).clamp(1, self.n as i64 - 3);
                (j, u - j as f64)
            }
        };
        let n = self.n as i64;
        let idx = [0, 1, 2, 3].map(|m| (j - 1 + m).rem_euclid(n) as usize);
        let f = fr;
        let w = [
            -f * (f - 1.0) * (f - 2.0) / 6.0,
            (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
            -(f + 1.0) * f * (f - 2.0) / 2.0,
            (f + 1.0) * f * (f - 1.0) / 6.0,
        ];
        let dw = [
            -(3.0 * f * f - 6.0 * f + 2.0) / 6.0,
            (3.0 * f * f - 4.0 * f - 1.0) / 2.0,
            -(3.0 * f * f - 2.0 * f - 2.0) / 2.0,
            (3.0 * f * f - 1.0) / 6.0,
        ]
        .map(|d| d / self.h);
        (idx, w, dw)
    }

    pub fn interp(&self, vals: &[f64], t: f64) -> (f64, f64) {
        let (idx, w, dw) = self.stencil(t);
        let mut v = 0.0;
        let mut d = 0.0;
        for m in 0..4 {
            v += w[m] * vals[idx[m]];
            d += dw[m] * vals[idx[m]];
        }
        (v, d)
    }

    fn interp3(&self, vals: &[Vec3], t: f64) -> (Vec3, Vec3) {
        let (idx, w, dw) = self.stencil(t);
        let mut v = Vec3::zeros();
        let mut d = Vec3::zeros();
        for m in 0..4 {
            v += vals[idx[m]] * w[m];
            d += vals[idx[m]] * dw[m];
        }
        (v, d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChartLeg {
    pub grid: LegGrid,
    /// Lift shift over one period (zero for open legs).
    pub shift: Vec3,
    /// Leg samples with the linear drift `(t/L) shift` removed.
    pub base: Vec<Vec3>,
    pub fs: Vec<Vec3>,
    pub fu: Vec<Vec3>,
}

impl ChartLeg {
    fn drift(&self) -> Vec3 {
        match self.grid.period {
            Some(l) => self.shift / l,
            None => Vec3::zeros(),
        }
    }

    /// Lifted leg point and its `t`-derivative.
    pub fn base_at(&self, t: f64) -> (Vec3, Vec3) {
        let (b, db) = self.grid.interp3(&self.base, t);
        (b + self.drift() * t, db + self.drift())
    }

    pub fn planes_at(&self, t: f64) -> (Vec3, Vec3) {
        (self.grid.interp3(&self.fs, t).0, self.grid.interp3(&self.fu, t).0)
    }
}

/// `Phi_i(t, w) = theta_i(t) + w_s F^s_i(t) + w_u F^u_i(t)` over each leg.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleChart {
    pub family: PeriodicCenterFamily,
    pub delta1: f64,
    pub legs: Vec<ChartLeg>,
    /// Largest sampled angle between `F^s, F^u` and `E^s, E^u`.
    pub max_angle: f64,
}

fn angle(a: &Vec3, b: &Vec3) -> f64 {
    a.normalize().cross(&b.normalize()).norm().asin()
}

impl BundleChart {
    /// Samples the splitting along every leg; `F^s, F^u` are the cubic
    /// interpolants of the sampled bundle directions.
    pub fn new(f: &SystemInstance, family: &PeriodicCenterFamily, delta1: f64) -> PhResult<Self> {
        let mut legs = Vec::with_capacity(family.k);
        let mut max_angle: f64 = 0.0;
        for curve in &family.curves {
            let (grid, shift) = match curve.closure {
                Some(c) => {
                    let n = SECTION_POINTS;
                    (LegGrid { x0: -0.5 * c.length, h: c.length / n as f64, n, period: Some(c.length) }, c.shift)
                }
                None => {
                    let n = curve.params.len();
                    (LegGrid { x0: curve.params[0], h: curve.params[1] - curve.params[0], n, period: None }, Vec3::zeros())
                }
            };
            let drift = grid.period.map(|l| shift / l).unwrap_or_else(Vec3::zeros);
            let mut base = Vec::with_capacity(grid.n);
            let mut fs: Vec<Vec3> = Vec::with_capacity(grid.n);
            let mut fu: Vec<Vec3> = Vec::with_capacity(grid.n);
            for j in 0..grid.n {
                let t = grid.t(j);
                let p = curve.lifted_at(t);
                base.push(p - drift * t);
                let fr = estimate_splitting(f, &Point3::new(p), DEFAULT_DEPTH)?;
                let (mut es, mut eu) = (fr.es_vec().normalize(), fr.eu_vec().normalize());
                if let (Some(ps), Some(pu)) = (fs.last(), fu.last()) {
                    if es.dot(ps) < 0.0 {
                        es = -es;
                    }
                    if eu.dot(pu) < 0.0 {
                        eu = -eu;
                    }
                }
                fs.push(es);
                fu.push(eu);
            }
            if grid.period.is_some() && (fs[0].dot(&fs[grid.n - 1]) < 0.0 || fu[0].dot(&fu[grid.n - 1]) < 0.0) {
                return Err(PhError::HypothesisViolation("normal bundle not orientable along a leg".into()));
            }
            let leg = ChartLeg { grid, shift, base, fs, fu };
            // angle bound at cell midpoints
            for j in (0..leg.grid.n.saturating_sub(1)).step_by(8) {
                let t = leg.grid.t(j) + 0.5 * leg.grid.h;
                let (b, _) = leg.base_at(t);
                let fr = estimate_splitting(f, &Point3::new(b), DEFAULT_DEPTH)?;
                let (ps, pu) = leg.planes_at(t);
                max_angle = max_angle.max(angle(&ps, &fr.es_vec())).max(angle(&pu, &fr.eu_vec()));
            }
            legs.push(leg);
        }
        if max_angle > PLANE_ANGLE_BOUND {
            return Err(PhError::HypothesisViolation(format!("plane field angle {max_angle:.3e}")));
        }
        Ok(Self { family: family.clone(), delta1, legs, max_angle })
    }

    pub fn k(&self) -> usize {
        self.legs.len()
    }

    /// Lifted `Phi_i(t, w)`.
    pub fn phi(&self, i: usize, t: f64, w: [f64; 2]) -> Vec3 {
        let leg = &self.legs[i];
        let (b, _) = leg.base_at(t);
        let (ps, pu) = leg.planes_at(t);
        b + ps * w[0] + pu * w[1]
    }

    fn phi_jac(&self, i: usize, t: f64, w: [f64; 2]) -> (Vec3, Mat3) {
        let leg = &self.legs[i];
        let (b, db) = leg.base_at(t);
        let (ps, dps) = leg.grid.interp3(&leg.fs, t);
        let (pu, dpu) = leg.grid.interp3(&leg.fu, t);
        let v = b + ps * w[0] + pu * w[1];
        let dt = db + dps * w[0] + dpu * w[1];
        (v, Mat3::from_columns(&[dt, ps, pu]))
    }

    /// Euclidean size of the fiber vector `w` at `(i, t)`.
    pub fn fiber_norm(&self, i: usize, t: f64, w: [f64; 2]) -> f64 {
        let (ps, pu) = self.legs[i].planes_at(t);
        (ps * w[0] + pu * w[1]).norm()
    }

    /// `Phi_i^{-1}` of a torus point (lift-agnostic), Newton from `guess`.
    pub fn inverse(&self, i: usize, target: &Vec3, guess: (f64, [f64; 2])) -> PhResult<(f64, [f64; 2])> {
        let (mut t, mut w) = guess;
        for _ in 0..40 {
            let (v, j) = self.phi_jac(i, t, w);
            let r = (v - target).map(wrap_signed);
            let step = j.lu().solve(&r).ok_or(PhError::IllConditioned(f64::INFINITY))?;
            t -= step[0];
            w[0] -= step[1];
            w[1] -= step[2];
            if step.norm() < 1e-15 * (1.0 + t.abs()) {
                return Ok((t, w));
            }
        }
        let r = (self.phi(i, t, w) - target).map(wrap_signed).norm();
        if r < 1e-13 {
            Ok((t, w))
        } else {
            Err(PhError::NotConverged(r))
        }
    }

    /// Sampled injectivity: distinct chart points with parameter gap below
    /// `delta1` must not coincide.
    pub fn injectivity_margin(&self, pairs: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = f64::INFINITY;
        for _ in 0..pairs {
            let i = rng.gen_range(0..self.k());
            let g = &self.legs[i].grid;
            let t = g.x0 + rng.gen::<f64>() * g.h * (g.n - 1) as f64;
            let dt = rng.gen_range(-self.delta1..self.delta1);
            let w1 = [rng.gen_range(-0.5..0.5) * self.delta1, rng.gen_range(-0.5..0.5) * self.delta1];
            let w2 = [rng.gen_range(-0.5..0.5) * self.delta1, rng.gen_range(-0.5..0.5) * self.delta1];
            let a = self.phi(i, t, w1);
            let b = self.phi(i, t + dt, w2);
            let sep = (a - b).map(wrap_signed).norm();
            let coord = (dt * dt + (w1[0] - w2[0]).powi(2) + (w1[1] - w2[1]).powi(2)).sqrt();
            if coord > 1e-12 {
                worst = worst.min(sep / coord);
            }
        }
        worst
    }
}

/// `F_tau = X~_tau o theta^* f` on `(leg, t, w)`.
pub struct LiftedMap<'a> {
    pub chart: &'a BundleChart,
    pub f: &'a SystemInstance,
    pub field: &'a VectorFieldSpec,
    pub tau: f64,
    pub params: FlowParams,
    /// Whether `||X|| |tau| ||Df|| < delta1 / 100` holds.
    pub within_budget: bool,
}

pub fn lift_map<'a>(chart: &'a BundleChart, f: &'a SystemInstance, field: &'a VectorFieldSpec, tau: f64) -> LiftedMap<'a> {
    let df = f.jacobian(&chart.family.point(0, 0.0)).norm();
    let within_budget = field.sup_norm() * tau.abs() * df < chart.delta1 / 100.0;
    LiftedMap { chart, f, field, tau, params: FlowParams::for_tau(tau), within_budget }
}

impl LiftedMap<'_> {
    /// Image of `(i, t, w)` as `(t', w')` on leg `i + 1`.
    pub fn apply(&self, i: usize, t: f64, w: [f64; 2]) -> PhResult<(f64, [f64; 2])> {
        self.apply_guess(i, t, w, None)
    }

    fn apply_guess(&self, i: usize, t: f64, w: [f64; 2], guess: Option<(f64, [f64; 2])>) -> PhResult<(f64, [f64; 2])> {
        let k = self.chart.k();
        let ip = (i + 1) % k;
        let target = self.downstairs(i, t, w);
        let guess = guess.unwrap_or((self.chart.family.induced_eval(i, t), [0.0, 0.0]));
        let (tp, wp) = self.chart.inverse(ip, &target, guess)?;
        if self.chart.fiber_norm(ip, tp, wp) > 0.5 * self.chart.delta1 {
            return Err(PhError::ChartEscape);
        }
        Ok((tp, wp))
    }

    /// `X_tau(f(Phi_i(t, w)))` on the lift.
    pub fn downstairs(&self, i: usize, t: f64, w: [f64; 2]) -> Vec3 {
        let p = self.chart.phi(i, t, w);
        flow_lift(self.field, self.tau, &self.f.eval_lift(&p), self.params)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionLeg {
    pub grid: LegGrid,
    pub s: Vec<f64>,
    pub u: Vec<f64>,
}

impl SectionLeg {
    pub fn eval(&self, t: f64) -> [f64; 2] {
        [self.grid.interp(&self.s, t).0, self.grid.interp(&self.u, t).0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantSection {
    pub tau: f64,
    pub legs: Vec<SectionLeg>,
    pub sup_norm: f64,
    /// Largest finite-difference slope of the fiber components.
    pub c1_estimate: f64,
    /// One-step invariance defect of the converged section.
    pub residual: f64,
    pub sweeps: usize,
    /// Observed ratio of successive sweep changes.
    pub contraction: f64,
}

impl InvariantSection {
    pub fn eval(&self, i: usize, t: f64) -> [f64; 2] {
        self.legs[i].eval(t)
    }

    /// Same section scaled by `c` (warm start for a nearby `tau`).
    pub fn scaled(&self, c: f64, tau: f64) -> Self {
        let mut out = self.clone();
        out.tau = tau;
        for l in &mut out.legs {
            l.s.iter_mut().for_each(|v| *v *= c);
            l.u.iter_mut().for_each(|v| *v *= c);
        }
        out
    }

    /// CSV rows `leg,t,s,u`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("leg,t,s,u\n");
        for (i, l) in self.legs.iter().enumerate() {
            for j in 0..l.grid.n {
                let _ = writeln!(out, "{},{:.17e},{:.17e},{:.17e}", i, l.grid.t(j), l.s[j], l.u[j]);
            }
        }
        out
    }
}

fn section_grid(chart: &BundleChart, i: usize) -> LegGrid {
    let g = &chart.legs[i].grid;
    match g.period {
        Some(_) => g.clone(),
        None => {
            let half = 0.8 * chart.family.window;
            LegGrid { x0: -half, h: 2.0 * half / 256.0, n: 257, period: None }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SectionOptions {
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for SectionOptions {
    fn default() -> Self {
        Self { tol: 1e-13, max_sweeps: 300 }
    }
}

/// Graph transform on sections: the unstable component is pulled back and
/// the stable component pushed forward, Jacobi style.
pub fn invariant_section(lm: &LiftedMap, opts: SectionOptions, warm: Option<&InvariantSection>) -> PhResult<InvariantSection> {
    let chart = lm.chart;
    let k = chart.k();
    let mut legs: Vec<SectionLeg> = match warm {
        Some(w) if w.legs.len() == k => w.legs.clone(),
        _ => (0..k)
            .map(|i| {
                let grid = section_grid(chart, i);
                let n = grid.n;
                SectionLeg { grid, s: vec![0.0; n], u: vec![0.0; n] }
            })
            .collect(),
    };
    // preimages of the target grid of leg i+1 on leg i, from the induced map
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let ip = (i + 1) % k;
        let gi = &legs[ip].grid;
        let im = &chart.family.induced[i];
        let mut v = Vec::with_capacity(gi.n);
        for m in 0..gi.n {
            let tm = gi.t(m);
            let mut p = tm - im.eval(0.0);
            for _ in 0..60 {
                let d = gi.diff(tm, im.eval(p));
                p += d / im.derivative(p);
                if d.abs() < 1e-15 {
                    break;
                }
            }
            v.push(p);
        }
        pre.push(v);
    }
    // du'/du along the unstable direction
    let mut lam: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (i, leg) in legs.iter().enumerate() {
        let mut v = Vec::with_capacity(leg.grid.n);
        for j in 0..leg.grid.n {
            let t = leg.grid.t(j);
            let w = [leg.s[j], leg.u[j]];
            let e = 1e-6;
            let a = lm.apply(i, t, [w[0], w[1] - e])?;
            let b = lm.apply(i, t, [w[0], w[1] + e])?;
            let d = (b.1[1] - a.1[1]) / (2.0 * e);
            if d.abs() <= 1.0 {
                return Err(PhError::LostNormalHyperbolicity(d.abs()));
            }
            v.push(d);
        }
        lam.push(v);
    }
    let mut prev_change = f64::INFINITY;
    let mut contraction: f64 = 0.0;
    let mut growth = 0;
    for sweep in 1..=opts.max_sweeps {
        let mut next = legs.clone();
        let mut change: f64 = 0.0;
        for i in 0..k {
            let ip = (i + 1) % k;
            let leg = &legs[i];
            for j in 0..leg.grid.n {
                let t = leg.grid.t(j);
                let (tp, wp) = lm.apply(i, t, [leg.s[j], leg.u[j]])?;
                let target = legs[ip].eval(tp)[1];
                let du = (target - wp[1]) / lam[i][j];
                next[i].u[j] = leg.u[j] + du;
                change = change.max(du.abs());
            }
            let gi = legs[ip].grid.clone();
            for m in 0..gi.n {
                let tm = gi.t(m);
                let mut p = pre[i][m];
                let mut img = lm.apply(i, p, leg.eval(p))?;
                for _ in 0..6 {
                    let d = gi.diff(tm, img.0);
                    if d.abs() < 1e-15 {
                        break;
                    }
                    p += d / chart.family.induced[i].derivative(p);
                    img = lm.apply(i, p, leg.eval(p))?;
                }
                pre[i][m] = p;
                let ds = img.1[0] - legs[ip].s[m];
                next[ip].s[m] = img.1[0];
                change = change.max(ds.abs());
            }
        }
        legs = next;
        if sweep > 2 && prev_change > 0.0 && prev_change.is_finite() {
            let r = change / prev_change;
            if change > 1e3 * opts.tol {
                contraction = contraction.max(r);
            }
            if r >= 1.0 && change > 1e3 * opts.tol {
                growth += 1;
                if growth >= 4 {
                    return Err(PhError::LostNormalHyperbolicity(r));
                }
            } else {
                growth = 0;
            }
        }
        prev_change = change;
        if change < opts.tol {
            let residual = section_residual(lm, &legs)?;
            let (sup_norm, c1_estimate) = section_norms(chart, &legs);
            return Ok(InvariantSection { tau: lm.tau, legs, sup_norm, c1_estimate, residual, sweeps: sweep, contraction });
        }
    }
    Err(PhError::SectionNotConverged(prev_change))
}

/// One-step defect: for each grid point the image of the section point is
/// compared with the section at the image parameter.
pub fn section_residual(lm: &LiftedMap, legs: &[SectionLeg]) -> PhResult<f64> {
    let k = legs.len();
    let mut worst: f64 = 0.0;
    for (i, leg) in legs.iter().enumerate() {
        let ip = (i + 1) % k;
        let inner = match leg.grid.period {
            Some(_) => 0..leg.grid.n,
            None => leg.grid.n / 4..3 * leg.grid.n / 4,
        };
        for j in inner {
            let t = leg.grid.t(j);
            let (tp, wp) = lm.apply(i, t, [leg.s[j], leg.u[j]])?;
            let sv = legs[ip].eval(tp);
            worst = worst.max((sv[0] - wp[0]).abs()).max((sv[1] - wp[1]).abs());
        }
    }
    Ok(worst)
}

fn section_norms(chart: &BundleChart, legs: &[SectionLeg]) -> (f64, f64) {
    let mut sup: f64 = 0.0;
    let mut c1: f64 = 0.0;
    for (i, leg) in legs.iter().enumerate() {
        for j in 0..leg.grid.n {
            sup = sup.max(chart.fiber_norm(i, leg.grid.t(j), [leg.s[j], leg.u[j]]));
            if j + 1 < leg.grid.n {
                let ds = (leg.s[j + 1] - leg.s[j]).abs() / leg.grid.h;
                let du = (leg.u[j + 1] - leg.u[j]).abs() / leg.grid.h;
                c1 = c1.max(ds).max(du);
            }
        }
    }
    (sup, c1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzRow {
    pub tau: f64,
    pub sup_norm: f64,
    pub ratio: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub rows: Vec<LipschitzRow>,
    pub l_hat: f64,
    /// `max ratio / min ratio` over rows with a nonzero ratio (1 if none).
    pub spread: f64,
}

impl LipschitzReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,sup_norm,ratio\n");
        for r in &self.rows {
            let _ = writeln!(out, "{:.6e},{:.17e},{:.17e}", r.tau, r.sup_norm, r.ratio);
        }
        out
    }
}

/// `L^ = max sup|sigma_tau| / |tau|` over the grid, with warm starts scaled
/// between consecutive `tau`.
pub fn lipschitz_estimate(
    chart: &BundleChart,
    f: &SystemInstance,
    field: &VectorFieldSpec,
    taus: &[f64],
) -> PhResult<LipschitzReport> {
    let mut rows = Vec::with_capacity(taus.len());
    let mut prev: Option<InvariantSection> = None;
    for &tau in taus {
        let lm = lift_map(chart, f, field, tau);
        let warm = prev.as_ref().filter(|p| p.tau != 0.0).map(|p| p.scaled(tau / p.tau, tau));
        let sec = invariant_section(&lm, SectionOptions::default(), warm.as_ref())?;
        let ratio = if tau == 0.0 { 0.0 } else { sec.sup_norm / tau.abs() };
        rows.push(LipschitzRow { tau, sup_norm: sec.sup_norm, ratio, residual: sec.residual });
        prev = Some(sec);
    }
    let l_hat = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let nz: Vec<f64> = rows.iter().map(|r| r.ratio).filter(|&r| r > 0.0).collect();
    let spread = if nz.is_empty() {
        1.0
    } else {
        nz.iter().cloned().fold(0.0, f64::max) / nz.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    Ok(LipschitzReport { rows, l_hat, spread })
}

/// Stable fibers over each leg, sampled on a coarse grid and interpolated in
/// the curve parameter. The su-disk through `theta_i(t)` is
/// `theta_i(t) + g_t(s) + u F^u_i(t)` with `g_t` the stable-graph offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuFoliation {
    pub grids: Vec<LegGrid>,
    pub fibers: Vec<Vec<LocalGraph>>,
    pub radius: f64,
}

pub const FOLIATION_NODES: usize = 32;

pub fn su_foliation(f: &SystemInstance, chart: &BundleChart, radius: f64) -> PhResult<SuFoliation> {
    let opts = GraphOptions { delta: radius, ..GraphOptions::default() };
    let mut grids = Vec::new();
    let mut fibers = Vec::new();
    for leg in &chart.legs {
        let g = match leg.grid.period {
            Some(l) => LegGrid { x0: -0.5 * l, h: l / FOLIATION_NODES as f64, n: FOLIATION_NODES, period: Some(l) },
            None => {
                let (a, b) = (leg.grid.x0, leg.grid.t(leg.grid.n - 1));
                LegGrid { x0: a, h: (b - a) / FOLIATION_NODES as f64, n: FOLIATION_NODES + 1, period: None }
            }
        };
        let mut row = Vec::with_capacity(g.n);
        for m in 0..g.n {
            let (b, _) = leg.base_at(g.t(m));
            row.push(stable_graph(f, &Point3::new(b), opts)?);
        }
        grids.push(g);
        fibers.push(row);
    }
    Ok(SuFoliation { grids, fibers, radius })
}

impl SuFoliation {
    /// Lifted point of the su-disk through `theta_i(t)` at coordinates `(s, u)`.
    pub fn point(&self, chart: &BundleChart, i: usize, t: f64, s: f64, u: f64) -> Vec3 {
        let g = &self.grids[i];
        let (idx, w, _) = g.stencil(t);
        let mut off = Vec3::zeros();
        for m in 0..4 {
            off += self.fibers[i][idx[m]].offset(s) * w[m];
        }
        let (b, _) = chart.legs[i].base_at(t);
        let (_, pu) = chart.legs[i].planes_at(t);
        b + off + pu * u
    }

    /// Disk coordinates `(t, s, u)` of the lifted point `q` on leg `i`.
    pub fn coords_of(&self, chart: &BundleChart, i: usize, q: &Vec3, guess: [f64; 3]) -> PhResult<[f64; 3]> {
        let mut x = guess;
        for _ in 0..40 {
            let r = (self.point(chart, i, x[0], x[1], x[2]) - q).map(wrap_signed);
            let j = self.fd_jac(chart, i, x, |c, v| self.point(chart, i, v[0], v[1], v[2]) - c);
            let step = j.lu().solve(&r).ok_or(PhError::FoliationGap)?;
            for m in 0..3 {
                x[m] -= step[m];
            }
            if step.norm() < 1e-15 {
                break;
            }
        }
        let r = (self.point(chart, i, x[0], x[1], x[2]) - q).map(wrap_signed).norm();
        if r > 1e-12 {
            return Err(PhError::NotConverged(r));
        }
        if x[1].abs() > self.radius {
            return Err(PhError::ChartEscape);
        }
        Ok(x)
    }

    fn fd_jac(&self, _chart: &BundleChart, _i: usize, x: [f64; 3], g: impl Fn(Vec3, [f64; 3]) -> Vec3) -> Mat3 {
        let mut j = Mat3::zeros();
        let zero = Vec3::zeros();
        for m in 0..3 {
            let e = 1e-7;
            let mut xp = x;
            let mut xm = x;
            xp[m] += e;
            xm[m] -= e;
            j.set_column(m, &((g(zero, xp) - g(zero, xm)) / (2.0 * e)));
        }
        j
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConjugacySample {
    pub leg: usize,
    pub t: f64,
    /// Section parameter of `h_tau(t)`.
    pub t_section: f64,
    pub w: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafConjugacy {
    pub tau: f64,
    pub samples: Vec<ConjugacySample>,
    pub monotone: bool,
    /// Smallest normalized determinant of the intersection Jacobian.
    pub transversality: f64,
}

/// `h_tau(t)`: the point of the section graph on the su-disk through
/// `theta_i(t)`, for `per_leg` parameters per leg.
pub fn su_conjugacy(chart: &BundleChart, fol: &SuFoliation, sec: &InvariantSection, per_leg: usize) -> PhResult<LeafConjugacy> {
    let mut samples = Vec::new();
    let mut transversality = f64::INFINITY;
    let mut monotone = true;
    for i in 0..chart.k() {
        let g = &sec.legs[i].grid;
        let span = match g.period {
            Some(l) => (g.x0, l / per_leg as f64),
            None => (0.5 * g.x0, -g.x0 / (per_leg - 1).max(1) as f64),
        };
        let mut last: Option<f64> = None;
        for m in 0..per_leg {
            let t = span.0 + span.1 * m as f64;
            let (x, det) = conjugacy_point(chart, fol, sec, i, t, [t, 0.0, 0.0])?;
            transversality = transversality.min(det);
            if det < 1e-6 {
                return Err(PhError::FoliationGap);
            }
            if m % 8 == 0 {
                for d in [[0.02, 0.0, 0.0], [-0.02, 0.0, 0.0], [0.0, 0.3, -0.3], [0.0, -0.3, 0.3]] {
                    let start = [t + d[0], d[1] * fol.radius, d[2] * fol.radius];
                    if let Ok((y, _)) = conjugacy_point(chart, fol, sec, i, t, start) {
                        if (y[0] - x[0]).abs() > 1e-9 {
                            return Err(PhError::NonUniqueIntersection);
                        }
                    }
                }
            }
            if let Some(p) = last {
                if x[0] <= p {
                    monotone = false;
                }
            }
            last = Some(x[0]);
            samples.push(ConjugacySample { leg: i, t, t_section: x[0], w: sec.eval(i, x[0]) });
        }
    }
    Ok(LeafConjugacy { tau: sec.tau, samples, monotone, transversality })
}

/// Solves `Phi_i(t', sigma_i(t')) = P_i(t, s, u)` for `(t', s, u)`.
fn conjugacy_point(
    chart: &BundleChart,
    fol: &SuFoliation,
    sec: &InvariantSection,
    i: usize,
    t: f64,
    start: [f64; 3],
) -> PhResult<([f64; 3], f64)> {
    let resid = |x: [f64; 3]| -> Vec3 {
        let w = sec.eval(i, x[0]);
        chart.phi(i, x[0], w) - fol.point(chart, i, t, x[1], x[2])
    };
    let mut x = start;
    let mut det = 0.0;
    for _ in 0..40 {
        let r = resid(x).map(wrap_signed);
        let mut j = Mat3::zeros();
        for m in 0..3 {
            let e = 1e-7;
            let mut xp = x;
            let mut xm = x;
            xp[m] += e;
            xm[m] -= e;
            j.set_column(m, &((resid(xp) - resid(xm)) / (2.0 * e)));
        }
        let cols: f64 = (0..3).map(|m| j.column(m).norm()).product();
        det = j.determinant().abs() / cols.max(1e-300);
        let step = j.lu().solve(&r).ok_or(PhError::FoliationGap)?;
        for m in 0..3 {
            x[m] -= step[m];
        }
        if step.norm() < 1e-15 {
            break;
        }
    }
    let r = resid(x).map(wrap_signed).norm();
    if r > 1e-12 || x[1].abs() > fol.radius {
        return Err(PhError::NotConverged(r));
    }
    Ok((x, det))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MovingForward {
    pub tau: f64,
    /// `(leg, t, advance)` for every conjugacy sample.
    pub advances: Vec<(usize, f64, f64)>,
    pub advance_min: f64,
    pub advance_max: f64,
    /// `advance_min` for `tau >= 0`, `advance_max` otherwise.
    pub delta_hat: f64,
}

impl MovingForward {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("leg,t,advance\n");
        for (i, t, a) in &self.advances {
            let _ = writeln!(out, "{i},{t:.17e},{a:.17e}");
        }
        out
    }
}

/// Advance of `F_tau(h_tau(t))` along the su-foliation beyond `theta^* f(t)`.
pub fn moving_forward_gap(lm: &LiftedMap, fol: &SuFoliation, conj: &LeafConjugacy) -> PhResult<MovingForward> {
    let chart = lm.chart;
    let k = chart.k();
    let mut advances = Vec::with_capacity(conj.samples.len());
    for smp in &conj.samples {
        let i = smp.leg;
        let ip = (i + 1) % k;
        let (tp, wp) = lm.apply(i, smp.t_section, smp.w)?;
        let q = chart.phi(ip, tp, wp);
        let base_img = chart.family.induced_eval(i, smp.t);
        let x = fol.coords_of(chart, ip, &q, [tp, 0.0, 0.0])?;
        let adv = section_diff(chart, ip, x[0], base_img);
        advances.push((i, smp.t, adv));
    }
    let advance_min = advances.iter().map(|a| a.2).fold(f64::INFINITY, f64::min);
    let advance_max = advances.iter().map(|a| a.2).fold(f64::NEG_INFINITY, f64::max);
    let delta_hat = if lm.tau >= 0.0 { advance_min } else { advance_max };
    Ok(MovingForward { tau: lm.tau, advances, advance_min, advance_max, delta_hat })
}

fn section_diff(chart: &BundleChart, i: usize, a: f64, b: f64) -> f64 {
    chart.legs[i].grid.diff(a, b)
}

/// `gamma(c) = a0 + a1 c + a2 c^2` in `(s, u)` chart coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterConeGraph {
    pub a0: [f64; 2],
    pub a1: [f64; 2],
    pub a2: [f64; 2],
}

impl CenterConeGraph {
    pub fn eval(&self, c: f64) -> [f64; 2] {
        [0, 1].map(|m| self.a0[m] + self.a1[m] * c + self.a2[m] * c * c)
    }

    pub fn max_slope(&self, delta: f64) -> f64 {
        [-delta, delta]
            .iter()
            .map(|&c| {
                let d = [0, 1].map(|m| self.a1[m] + 2.0 * self.a2[m] * c);
                (d[0] * d[0] + d[1] * d[1]).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Same shape shifted so that the graph passes through `(s, c, u)`.
    pub fn through(&self, p: [f64; 3]) -> Self {
        let at = self.eval(p[1]);
        Self { a0: [self.a0[0] + p[0] - at[0], self.a0[1] + p[2] - at[1]], ..*self }
    }
}

/// `eta_1 = min(inf |Df|E^s| / 1000, (inf m(Df|E^u) / |Df|E^c|)^{1/4} - 1)`
/// over seeded samples.
pub fn eta1_from_splitting(f: &SystemInstance, samples: usize, seed: u64) -> PhResult<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s_min = f64::INFINITY;
    let mut ratio_min = f64::INFINITY;
    for _ in 0..samples {
        let p = Point3::xyz(rng.gen(), rng.gen(), rng.gen());
        let fr = estimate_splitting(f, &p, DEFAULT_DEPTH)?;
        let (s, c, u) = one_step_rates(f, &fr);
        s_min = s_min.min(s);
        ratio_min = ratio_min.min(u / c);
    }
    Ok((s_min / 1000.0).min(ratio_min.powf(0.25) - 1.0))
}

/// Linearization defect of `exp_{f(y)}^{-1} o f o exp_y` on `T_yM(delta)`:
/// ten times the largest `|F(v) - F(0) - DF v| / |v|` over seeded directions.
pub fn chart_defect(f: &SystemInstance, y: &Point3, delta: f64, samples: usize, seed: u64) -> PhResult<f64> {
    let by = chart_basis(f, y)?;
    let fy = f.eval(y);
    let bf = chart_basis(f, &fy)?;
    let inv = bf.try_inverse().ok_or(PhError::DegenerateFrame)?;
    let m = inv * f.jacobian(y) * by;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * delta;
        let img = inv * (f.eval_lift(&(y.coords + by * v)) - f.eval_lift(&y.coords));
        worst = worst.max((img - m * v).norm() / v.norm());
    }
    Ok(10.0 * worst)
}

/// Largest `delta` (halving from `start`) with `chart_defect <= theta eta1 / 10`
/// and stable-graph slope below `eta1`.
pub fn delta4_for(f: &SystemInstance, y: &Point3, eta1: f64, theta: f64, start: f64) -> PhResult<f64> {
    let mut d = start;
    for _ in 0..60 {
        if chart_defect(f, y, d, 16, 1)? <= 0.1 * theta * eta1 {
            let g = stable_graph(f, y, GraphOptions { delta: d, ..GraphOptions::default() })?;
            if g.max_slope() < eta1 {
                return Ok(d);
            }
        }
        d *= 0.5;
    }
    Err(PhError::ChartTooSmall)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationCheck {
    pub w1: [f64; 3],
    pub v1u: f64,
    pub z1: [f64; 3],
    pub fz1: [f64; 3],
    pub z2: [f64; 3],
    pub w2: [f64; 3],
    pub v2u: f64,
    /// `f(z_1)^c - pi^c phi^s(f(z_1)^s)`.
    pub lhs2: f64,
    /// `-theta eta_1 (1-eta_1)/(1+eta_1) |f(z_1)^u - pi^u phi^s(f(z_1)^s)|`.
    pub mid2: f64,
    /// `-theta eta_1 |Df(y)| |v_1^u|`.
    pub rhs2: f64,
    pub lhs3: f64,
    pub rhs3: f64,
    pub pass2: bool,
    pub pass3: bool,
    pub slack2: f64,
    pub slack3: f64,
}

struct DomChart {
    base: Point3,
    basis: Mat3,
    inv: Mat3,
    graph: LocalGraph,
}

impl DomChart {
    fn new(f: &SystemInstance, y: &Point3, delta4: f64) -> PhResult<Self> {
        let graph = stable_graph(f, y, GraphOptions { delta: delta4, ..GraphOptions::default() })?;
        let basis = graph.basis;
        let inv = basis.try_inverse().ok_or(PhError::DegenerateFrame)?;
        Ok(Self { base: *y, basis, inv, graph })
    }

    fn coords(&self, p: &Point3) -> Vec3 {
        self.inv * log_map(&self.base, p)
    }

    fn point(&self, v: &Vec3) -> Point3 {
        exp_map(&self.base, &(self.basis * v))
    }

    /// `(pi^c phi^s(s), pi^u phi^s(s))`.
    fn phi_s(&self, s: f64) -> (f64, f64) {
        self.graph.eval(s)
    }

    /// Intersection of `graph(gamma)` with the su-disk graph through the
    /// origin: returns `(w, v^u)`.
    fn su_intersection(&self, gamma: &CenterConeGraph) -> PhResult<([f64; 3], f64)> {
        let mut c = 0.0;
        for _ in 0..200 {
            let g = gamma.eval(c);
            let next = self.phi_s(g[0]).0;
            if (next - c).abs() < 1e-18 {
                c = next;
                break;
            }
            c = next;
        }
        let g = gamma.eval(c);
        let (_, pu) = self.phi_s(g[0]);
        Ok(([g[0], c, g[1]], g[1] - pu))
    }
}

/// Checks both displayed inequalities at `y`. `gamma_fy` is a shape that is
/// translated to pass through `z_2`.
#[allow(clippy::too_many_arguments)]
pub fn local_domination_check(
    f: &SystemInstance,
    y: &Point3,
    gamma_y: &CenterConeGraph,
    gamma_fy: &CenterConeGraph,
    field: &VectorFieldSpec,
    tau: f64,
    theta: f64,
    eta1: f64,
    delta4: f64,
) -> PhResult<DominationCheck> {
    if !(theta > 0.0 && theta <= 1.0) || tau < 0.0 {
        return Err(PhError::HypothesisViolation(format!("theta={theta} tau={tau}")));
    }
    if gamma_y.max_slope(delta4) >= eta1 || gamma_fy.max_slope(delta4) >= eta1 {
        return Err(PhError::HypothesisViolation("center-cone graph slope".into()));
    }
    let cy = DomChart::new(f, y, delta4)?;
    let fy = f.eval(y);
    let cf = DomChart::new(f, &fy, delta4)?;
    if cy.graph.max_slope() >= eta1 || cf.graph.max_slope() >= eta1 {
        return Err(PhError::HypothesisViolation("stable graph slope above eta1".into()));
    }
    // cone condition on X over the chart at f(y)
    for v in [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, -1.0, -1.0], [1.0, -1.0, 1.0]] {
        let p = cf.point(&(Vec3::new(v[0], v[1], v[2]) * delta4));
        let xv = cf.inv * field.eval(&p);
        if xv[1] < 0.0 || xv[0].abs() + xv[2].abs() > 3.0 * eta1 * xv[1] + 1e-300 {
            if xv.norm() > 0.0 {
                return Err(PhError::HypothesisViolation("field outside the eta1 cone".into()));
            }
        }
    }
    let in_chart = |v: &Vec3| v.iter().all(|c| c.abs() <= delta4);
    let (w1, v1u) = cy.su_intersection(gamma_y)?;
    let z1c = w1[1] - theta * eta1 * v1u.abs();
    let g = gamma_y.eval(z1c);
    let z1 = Vec3::new(g[0], z1c, g[1]);
    if !in_chart(&z1) {
        return Err(PhError::ChartEscape);
    }
    let fp = f.eval(&cy.point(&z1));
    let fz1 = cf.coords(&fp);
    if !in_chart(&fz1) {
        return Err(PhError::ChartEscape);
    }
    let (pc, pu) = cf.phi_s(fz1[0]);
    let lhs2 = fz1[1] - pc;
    let mid2 = -theta * eta1 * (1.0 - eta1) / (1.0 + eta1) * (fz1[2] - pu).abs();
    let dfy = f.jacobian(y).norm();
    let rhs2 = -theta * eta1 * dfy * v1u.abs();
    let z2p = flow_lift(field, tau, &fp.coords, FlowParams::for_tau(tau));
    let z2 = cf.coords(&Point3::new(z2p));
    if !in_chart(&z2) {
        return Err(PhError::ChartEscape);
    }
    let gfy = gamma_fy.through([z2[0], z2[1], z2[2]]);
    let (w2, v2u) = cf.su_intersection(&gfy)?;
    let lhs3 = z2[1];
    let rhs3 = w2[1] - theta * eta1 * v2u.abs();
    // rounding allowance at the scale of the chart coordinates
    let eps = 1e-15;
    let slack2 = (lhs2 - mid2).min(mid2 - rhs2);
    let slack3 = lhs3 - rhs3;
    Ok(DominationCheck {
        w1,
        v1u,
        z1: [z1[0], z1[1], z1[2]],
        fz1: [fz1[0], fz1[1], fz1[2]],
        z2: [z2[0], z2[1], z2[2]],
        w2,
        v2u,
        lhs2,
        mid2,
        rhs2,
        lhs3,
        rhs3,
        pass2: slack2 >= -eps,
        pass3: slack3 >= -eps,
        slack2,
        slack3,
    })
}

/// Seeded admissible configuration for [`local_domination_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DominationConfig {
    pub y: Point3,
    pub gamma_y: CenterConeGraph,
    pub gamma_fy: CenterConeGraph,
    pub tau: f64,
    pub theta: f64,
    pub delta4: f64,
}

/// `theta` is log-uniform on `[0.01, 1]`; `delta4` is certified for it.
pub fn random_domination_config(f: &SystemInstance, rng: &mut impl Rng, eta1: f64) -> PhResult<DominationConfig> {
    let y = Point3::xyz(rng.gen(), rng.gen(), rng.gen());
    let theta = 10f64.powf(rng.gen_range(-2.0..=0.0));
    let delta4 = delta4_for(f, &y, eta1, theta, 1e-3)?;
    let cone = |rng: &mut dyn rand::RngCore, offset: bool| {
        // each component below 0.6 eta1 on [-delta4, delta4], so the norm stays under 0.85 eta1
        let a1 = [rng.gen_range(-0.3..0.3) * eta1, rng.gen_range(-0.3..0.3) * eta1];
        let a2 = [rng.gen_range(-0.15..0.15) * eta1 / delta4, rng.gen_range(-0.15..0.15) * eta1 / delta4];
        let a0 = if offset {
            [rng.gen_range(-0.2..0.2) * delta4, rng.gen_range(-0.2..0.2) * delta4]
        } else {
            [0.0, 0.0]
        };
        CenterConeGraph { a0, a1, a2 }
    };
    let gamma_y = cone(rng, true);
    let gamma_fy = cone(rng, false);
    Ok(DominationConfig { y, gamma_y, gamma_fy, tau: rng.gen_range(0.0..0.1) * delta4, theta, delta4 })
}

/// Decomposition matrix of the chart at `y` (columns `e_s, e_c, e_u`).
pub fn chart_basis(f: &SystemInstance, y: &Point3) -> PhResult<Matrix3<f64>> {
    Ok(estimate_splitting(f, y, DEFAULT_DEPTH)?.basis())
}
