//! Closing algorithms: global and local perturbation closing by a scalar
//! root in `tau`, perturbation-free closing for orientation-reversing returns
//! by a degree argument, and the dispatcher choosing between them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::center_curves::{build_periodic_family, center_connection, scan_returns, NearReturn, DEFAULT_STARTS};
use crate::degree::{boundary_hypotheses_check, degree_fixed_point, BoundaryReport, BoxDomain};
use crate::error::{PhError, PhResult};
use crate::geometry::{log_map, torus_distance, wrap_signed, Mat3, Point3, Vec3};
use crate::invariant_manifolds::{center_curve_window, cs_plaque, GraphOptions, Plaque};
use crate::perturbation::{
    build_bump_field, fd_jacobian, flow_lift, global_divergence_free_field, max_divergence, FlowParams,
    TransversalityClass, VectorFieldSpec,
};
use crate::shadowing::{
    invariant_section, lift_map, moving_forward_gap, su_conjugacy, su_foliation, BundleChart, LiftedMap,
    SectionOptions, DEFAULT_DELTA1,
};
use crate::splitting::{center_orientation_transport, estimate_splitting, DEFAULT_DEPTH};
use crate::systems::SystemInstance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClosingMethod {
    Global,
    Local,
    Degree,
    NoneNeeded,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosingDiagnostics {
    /// Center offset `s_n = t_0` of the selected family.
    pub s_n: f64,
    pub delta_hat: Option<f64>,
    pub l_hat: Option<f64>,
    /// `(tau, g(tau))` for every root-finder evaluation.
    pub trace: Vec<(f64, f64)>,
    pub sign_changes: usize,
    /// Per-leg parameter advance along the closing orbit at the final `tau`.
    pub leg_advances: Vec<f64>,
    pub boundary: Option<BoundaryReport>,
    /// Largest `||det D(X_tau o f)| - 1|` over the sampled points.
    pub det_deviation: Option<f64>,
    pub max_divergence: Option<f64>,
    pub distance_bound_holds: Option<bool>,
    pub route: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosingResult {
    pub tau: f64,
    pub p: Point3,
    pub k: usize,
    /// `d((X_tau o f)^k(p), p)` recomputed by direct iteration.
    pub residual: f64,
    pub dist_to_target: f64,
    pub method: ClosingMethod,
    pub diagnostics: ClosingDiagnostics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosingOptions {
    pub seed: u64,
    pub k_max: usize,
    pub tol: f64,
    pub window: f64,
    pub starts: usize,
    /// Compute the section, conjugacy and moving-forward diagnostics.
    pub diagnostics: bool,
}

impl Default for ClosingOptions {
    fn default() -> Self {
        Self { seed: 0, k_max: 15, tol: 1e-9, window: 0.6, starts: DEFAULT_STARTS, diagnostics: true }
    }
}

/// `d((X_tau o f)^k(p), p)` with a fresh integrator for every step.
pub fn closing_residual(f: &SystemInstance, field: &VectorFieldSpec, tau: f64, p: &Point3, k: usize) -> f64 {
    let mut q = p.coords;
    for _ in 0..k {
        q = flow_lift(field, tau, &f.eval_lift(&q), FlowParams::for_tau(tau));
    }
    torus_distance(p, &Point3::new(q))
}

fn composed(f: &SystemInstance, field: &VectorFieldSpec, tau: f64, v: &Vec3, k: usize) -> Vec3 {
    let mut q = *v;
    for _ in 0..k {
        q = flow_lift(field, tau, &f.eval_lift(&q), FlowParams::for_tau(tau));
    }
    q
}

/// Minimum-norm Newton on `(X_tau o f)^k(p) = p` with `tau` fixed.
fn polish(f: &SystemInstance, field: &VectorFieldSpec, tau: f64, p: &Point3, k: usize) -> Point3 {
    let mut v = p.coords;
    for _ in 0..20 {
        let r = (composed(f, field, tau, &v, k) - v).map(wrap_signed);
        if r.norm() < 1e-15 {
            break;
        }
        let j = fd_jacobian(|w| composed(f, field, tau, w, k), &v, 1e-7) - Mat3::identity();
        let Ok(step) = j.svd(true, true).solve(&r, 1e-10) else { break };
        let next = v - step;
        let rn = (composed(f, field, tau, &next, k) - next).map(wrap_signed).norm();
        if rn >= r.norm() {
            break;
        }
        v = next;
    }
    Point3::new(v)
}

/// A return of `x` whose family can absorb the predicted closing time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub nr: NearReturn,
    /// `-t_0 / sum_i X^c(f^i y)`.
    pub predicted_tau: f64,
}

fn center_component(f: &SystemInstance, field: &VectorFieldSpec, p: &Point3) -> PhResult<f64> {
    let fr = estimate_splitting(f, p, DEFAULT_DEPTH)?;
    Ok(fr.decompose(&field.eval(p))[1])
}

/// First `k` with an orientation-preserving return inside `radius` whose
/// predicted closing time satisfies `|tau| <= 0.9 / n`.
pub fn select_candidate(
    f: &SystemInstance,
    x: &Point3,
    field: &VectorFieldSpec,
    n: usize,
    radius: f64,
    opts: &ClosingOptions,
) -> PhResult<Candidate> {
    let bound = 0.9 / n as f64;
    let mut reversing_seen = false;
    for k in 1..=opts.k_max {
        let mut best: Option<Candidate> = None;
        for nr in scan_returns(f, x, k, radius, opts.starts, opts.seed) {
            if center_orientation_transport(f, &nr.y, k)? < 0 {
                reversing_seen = true;
                continue;
            }
            let mut rate = 0.0;
            let mut q = nr.y;
            for _ in 0..k {
                q = f.eval(&q);
                rate += center_component(f, field, &q)?;
            }
            if rate <= 0.0 {
                continue;
            }
            let predicted_tau = -nr.center_offset / rate;
            if predicted_tau.abs() <= bound && best.as_ref().is_none_or(|b| predicted_tau.abs() < b.predicted_tau.abs()) {
                best = Some(Candidate { nr, predicted_tau });
            }
        }
        if let Some(c) = best {
            return Ok(c);
        }
    }
    if reversing_seen {
        Err(PhError::OrientationViolation)
    } else {
        Err(PhError::FamilyNotFound)
    }
}

/// Multiple-shooting state: `(t_i, w_i)` on every leg with `t_0 = 0`.
#[derive(Clone, Debug)]
struct ShootState {
    t: Vec<f64>,
    w: Vec<[f64; 2]>,
}

impl ShootState {
    fn unperturbed(fam: &crate::center_curves::PeriodicCenterFamily) -> Self {
        let mut t = vec![0.0; fam.k];
        for i in 1..fam.k {
            t[i] = fam.induced_eval(i - 1, t[i - 1]);
        }
        Self { t, w: vec![[0.0; 2]; fam.k] }
    }

    /// Unknowns `w_0, (t_i, w_i)_{i >= 1}`; `3k - 1` of them.
    fn get(&self, j: usize) -> f64 {
        if j < 2 {
            return self.w[0][j];
        }
        let (i, m) = (1 + (j - 2) / 3, (j - 2) % 3);
        if m == 0 {
            self.t[i]
        } else {
            self.w[i][m - 1]
        }
    }

    fn set(&mut self, j: usize, v: f64) {
        if j < 2 {
            self.w[0][j] = v;
            return;
        }
        let (i, m) = (1 + (j - 2) / 3, (j - 2) % 3);
        if m == 0 {
            self.t[i] = v;
        } else {
            self.w[i][m - 1] = v;
        }
    }

    fn leg_of(j: usize) -> usize {
        if j < 2 {
            0
        } else {
            1 + (j - 2) / 3
        }
    }
}

/// Closing equation solved at `t = 0` on leg 0: the fiber coordinates close
/// up around the cycle and `g` is the leftover parameter displacement.
struct Shooter<'a> {
    chart: &'a BundleChart,
    f: &'a SystemInstance,
    field: &'a VectorFieldSpec,
}

struct Shot {
    g: f64,
    state: ShootState,
    /// Image of `(t_i, w_i)` under the lifted map of leg `i`.
    images: Vec<(f64, [f64; 2])>,
}

impl Shooter<'_> {
    fn images(&self, lm: &LiftedMap, st: &ShootState) -> PhResult<Vec<(f64, [f64; 2])>> {
        (0..self.chart.k()).map(|i| lm.apply(i, st.t[i], st.w[i])).collect()
    }

    fn residual(&self, st: &ShootState, img: &[(f64, [f64; 2])]) -> Vec<f64> {
        let k = self.chart.k();
        let mut r = Vec::with_capacity(3 * k - 1);
        for i in 0..k {
            let j = (i + 1) % k;
            if j != 0 {
                r.push(self.chart.legs[j].grid.diff(img[i].0, st.t[j]));
            }
            r.push(img[i].1[0] - st.w[j][0]);
            r.push(img[i].1[1] - st.w[j][1]);
        }
        r
    }

    fn shoot(&self, tau: f64, warm: &ShootState) -> PhResult<Shot> {
        let lm = lift_map(self.chart, self.f, self.field, tau);
        let k = self.chart.k();
        let m = 3 * k - 1;
        let mut st = warm.clone();
        let mut img = self.images(&lm, &st)?;
        let mut res = self.residual(&st, &img);
        let norm = |r: &[f64]| r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for _ in 0..30 {
            let r0 = norm(&res);
            if r0 < 1e-16 {
                break;
            }
            let e = 1e-9;
            let mut jac = nalgebra::DMatrix::<f64>::zeros(m, m);
            for j in 0..m {
                let mut sp = st.clone();
                sp.set(j, st.get(j) + e);
                let leg = ShootState::leg_of(j);
                let mut ip = img.clone();
                ip[leg] = lm.apply(leg, sp.t[leg], sp.w[leg])?;
                let rp = self.residual(&sp, &ip);
                for (row, (a, b)) in rp.iter().zip(&res).enumerate() {
                    jac[(row, j)] = (a - b) / e;
                }
            }
            let rhs = nalgebra::DVector::from_column_slice(&res);
            let step = jac.lu().solve(&rhs).ok_or(PhError::IllConditioned(f64::INFINITY))?;
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let mut trial = st.clone();
                for j in 0..m {
                    trial.set(j, st.get(j) - lambda * step[j]);
                }
                if let Ok(ti) = self.images(&lm, &trial) {
                    let tr = self.residual(&trial, &ti);
                    if norm(&tr) < r0 {
                        st = trial;
                        img = ti;
                        res = tr;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !accepted || lambda * step.amax() < 1e-17 {
                break;
            }
        }
        if norm(&res) > 1e-11 {
            return Err(PhError::NotConverged(norm(&res)));
        }
        let g = self.chart.legs[0].grid.diff(img[k - 1].0, 0.0);
        Ok(Shot { g, state: st, images: img })
    }
}

/// Illinois regula falsi on `[a, b]` with bisection every third step.
fn solve_bracket(
    mut eval: impl FnMut(f64) -> PhResult<f64>,
    a: f64,
    b: f64,
    ga: f64,
    gb: f64,
    trace: &mut Vec<(f64, f64)>,
) -> PhResult<f64> {
    let (mut a, mut b, mut ga, mut gb) = (a, b, ga, gb);
    let mut side = 0;
    for it in 0..200 {
        if (b - a).abs() < 1e-15 {
            break;
        }
        let c = if it % 3 == 2 { 0.5 * (a + b) } else { (a * gb - b * ga) / (gb - ga) };
        let gc = eval(c)?;
        trace.push((c, gc));
        if gc == 0.0 || gc.abs() < 1e-15 {
            return Ok(c);
        }
        if gc.signum() == gb.signum() {
            b = c;
            gb = gc;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            ga = gc;
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        }
    }
    Ok(if ga.abs() < gb.abs() { a } else { b })
}

fn sign_changes(trace: &[(f64, f64)]) -> usize {
    let mut pts: Vec<(f64, f64)> = trace.to_vec();
    pts.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    pts.windows(2).filter(|w| w[0].1.signum() != w[1].1.signum()).count()
}

fn periodic_at(f: &SystemInstance, x: &Point3, k_max: usize) -> Option<usize> {
    (1..=k_max).find(|&k| torus_distance(x, &f.iterate(x, k)) < 1e-12)
}

fn none_needed(x: &Point3, k: usize, route: &str) -> ClosingResult {
    ClosingResult {
        tau: 0.0,
        p: *x,
        k,
        residual: 0.0,
        dist_to_target: 0.0,
        method: ClosingMethod::NoneNeeded,
        diagnostics: ClosingDiagnostics { route: route.into(), ..Default::default() },
    }
}

/// Shared root solve for the perturbation routes.
fn close_with_field(
    f: &SystemInstance,
    x: &Point3,
    field: &VectorFieldSpec,
    n: usize,
    cand: &Candidate,
    method: ClosingMethod,
    opts: &ClosingOptions,
) -> PhResult<ClosingResult> {
    let conn = center_connection(f, &cand.nr)?;
    let family = build_periodic_family(f, &conn, opts.window)?;
    let chart = BundleChart::new(f, &family, DEFAULT_DELTA1)?;
    let shooter = Shooter { chart: &chart, f, field };
    let mut diagnostics = ClosingDiagnostics { s_n: family.t0, ..Default::default() };
    let k = family.k;
    let s0 = shooter.shoot(0.0, &ShootState::unperturbed(&family))?;
    diagnostics.trace.push((0.0, s0.g));
    let mut tau = 0.0;
    let mut shot = s0;
    if shot.g != 0.0 {
        // grow the bracket from the linear prediction; strong fields wrap the
        // closed legs long before |tau| = 1/n
        let cap = 1.0 / n as f64;
        let dir = if shot.g < 0.0 { 1.0 } else { -1.0 };
        let mut reach = (1.5 * cand.predicted_tau.abs()).clamp(1e-12, cap);
        let mut warm = shot.state.clone();
        let (end, far) = loop {
            let end = dir * reach;
            let far = shooter.shoot(end, &warm)?;
            diagnostics.trace.push((end, far.g));
            if far.g.signum() != shot.g.signum() {
                break (end, far);
            }
            if reach >= cap {
                return Err(PhError::BisectionBracketFailure(shot.g, far.g));
            }
            warm = far.state;
            reach = (2.0 * reach).min(cap);
        };
        let mut trace = Vec::new();
        let mut warm = far.state.clone();
        tau = solve_bracket(
            |t| {
                let s = shooter.shoot(t, &warm)?;
                warm = s.state;
                Ok(s.g)
            },
            0.0,
            end,
            shot.g,
            far.g,
            &mut trace,
        )?;
        diagnostics.trace.extend(trace);
        shot = shooter.shoot(tau, &warm)?;
    }
    diagnostics.sign_changes = sign_changes(&diagnostics.trace);
    diagnostics.leg_advances = (0..k)
        .map(|i| chart.legs[(i + 1) % k].grid.diff(shot.images[i].0, family.induced_eval(i, shot.state.t[i])))
        .collect();
    let p0 = Point3::new(chart.phi(0, 0.0, shot.state.w[0]));
    let mut p = p0;
    if closing_residual(f, field, tau, &p, k) > 1e-13 {
        p = polish(f, field, tau, &p0, k);
    }
    let residual = closing_residual(f, field, tau, &p, k);
    if residual >= opts.tol {
        return Err(PhError::NotConverged(residual));
    }
    if opts.diagnostics {
        let lm = lift_map(&chart, f, field, tau);
        if let Ok(sec) = invariant_section(&lm, SectionOptions::default(), None) {
            diagnostics.l_hat = Some(if tau == 0.0 { 0.0 } else { sec.sup_norm / tau.abs() });
            if let Ok(fol) = su_foliation(f, &chart, 0.05) {
                if let Ok(conj) = su_conjugacy(&chart, &fol, &sec, 16) {
                    diagnostics.delta_hat = moving_forward_gap(&lm, &fol, &conj).ok().map(|m| m.delta_hat);
                }
            }
        }
    }
    let dist_to_target = torus_distance(x, &p);
    if let Some(l) = diagnostics.l_hat {
        diagnostics.distance_bound_holds = Some(dist_to_target <= (l + 1.0) / n as f64 + 10.0 * opts.tol);
    }
    Ok(ClosingResult { tau, p, k, residual, dist_to_target, method, diagnostics })
}

/// Global closing with a positively transverse field on the whole torus.
pub fn close_global(f: &SystemInstance, x: &Point3, field: &VectorFieldSpec, n: usize, opts: &ClosingOptions) -> PhResult<ClosingResult> {
    if n == 0 {
        return Err(PhError::ConfigInvalid("n must be positive".into()));
    }
    if field.class != TransversalityClass::PositiveGlobal {
        return Err(PhError::HypothesisViolation("field is not positive_global".into()));
    }
    let rep = crate::perturbation::transversality_report(f, field, 200, opts.seed)?;
    if !rep.class_holds {
        return Err(PhError::HypothesisViolation(format!("transversality margin {:.3e}", rep.min_margin)));
    }
    if let Some(k) = periodic_at(f, x, opts.k_max) {
        return Ok(none_needed(x, k, "global"));
    }
    let cand = select_candidate(f, x, field, n, 0.5 / n as f64, opts)?;
    let mut r = close_with_field(f, x, field, n, &cand, ClosingMethod::Global, opts)?;
    r.diagnostics.route = "global".into();
    Ok(r)
}

/// Local closing with a bump field supported in the ball of radius `r_u`
/// around `x` (`eps0 = r_u / 5`, `b1 = 1/2`).
pub fn close_local(f: &SystemInstance, x: &Point3, r_u: f64, n: usize, opts: &ClosingOptions) -> PhResult<ClosingResult> {
    if n == 0 {
        return Err(PhError::ConfigInvalid("n must be positive".into()));
    }
    let eps0 = r_u / 5.0;
    let field = build_bump_field(f, x, eps0, 0.5)?;
    if let Some(k) = periodic_at(f, x, opts.k_max) {
        return Ok(none_needed(x, k, "local"));
    }
    // the start of the family must sit on the plateau of the bump
    let radius = (0.5 / n as f64).min(eps0);
    let cand = select_candidate(f, x, &field, n, radius, opts)?;
    let mut r = close_with_field(f, x, &field, n, &cand, ClosingMethod::Local, opts)?;
    r.diagnostics.route = "local".into();
    Ok(r)
}

/// Half-length of the center segment carrying the degree chart.
pub const DEGREE_CHART_HALF: f64 = 0.099;
/// Radius of the stable fibers of the degree chart.
pub const DEGREE_FIBER_RADIUS: f64 = 0.05;

/// Return map `H(t, v) = Phi o Hol^u o f^k o Phi^{-1}` on a cs-plaque.
pub struct ReturnMap<'a> {
    pub f: &'a SystemInstance,
    pub plaque: Plaque,
    pub k: usize,
    pub rho: f64,
    pub half: f64,
}

impl ReturnMap<'_> {
    pub fn point(&self, t: f64, v: f64) -> Vec3 {
        self.plaque.lifted(t, self.rho * v)
    }

    /// Plaque coordinates of the unstable-holonomy projection of `z`.
    pub fn holonomy(&self, z: &Vec3, guess: (f64, f64)) -> PhResult<(f64, f64)> {
        let eu = estimate_splitting(self.f, &Point3::new(*z), DEFAULT_DEPTH)?.eu_vec().normalize();
        let (mut t, mut r, mut u) = (guess.0, guess.1, 0.0);
        for _ in 0..40 {
            let res = (self.plaque.lifted(t, r) - z - eu * u).map(wrap_signed);
            let e = 1e-7;
            let dt = (self.plaque.lifted(t + e, r) - self.plaque.lifted(t - e, r)) / (2.0 * e);
            let dr = (self.plaque.lifted(t, r + e) - self.plaque.lifted(t, r - e)) / (2.0 * e);
            let j = Mat3::from_columns(&[dt, dr, -eu]);
            let step = j.lu().solve(&res).ok_or(PhError::HolonomyUndefined)?;
            t -= step[0];
            r -= step[1];
            u -= step[2];
            if step.norm() < 1e-15 {
                break;
            }
        }
        let res = (self.plaque.lifted(t, r) - z - eu * u).map(wrap_signed).norm();
        if res > 1e-12 || t.abs() > 2.0 * self.half || r.abs() > self.rho || u.abs() > 0.25 {
            return Err(PhError::HolonomyUndefined);
        }
        Ok((t, r))
    }

    pub fn eval(&self, t: f64, v: f64) -> PhResult<(f64, f64)> {
        let mut z = self.point(t, v);
        for _ in 0..self.k {
            z = self.f.eval_lift(&z);
        }
        let (tp, rp) = self.holonomy(&z, (t, 0.0))?;
        Ok((tp, rp / self.rho))
    }
}

/// Closing without perturbation for a return that reverses the center
/// orientation.
pub fn close_degree(f: &SystemInstance, x: &Point3, nr: &NearReturn) -> PhResult<ClosingResult> {
    let k = nr.k;
    if center_orientation_transport(f, &nr.y, k)? > 0 {
        return Err(PhError::OrientationViolation);
    }
    let curve = center_curve_window(f, &nr.y, DEGREE_CHART_HALF, 1, DEGREE_CHART_HALF / 64.0)?;
    let opts = GraphOptions { delta: DEGREE_FIBER_RADIUS, ..GraphOptions::default() };
    let plaque = cs_plaque(f, &curve, opts, 33).map_err(|_| PhError::ChartTooSmall)?;
    let h = ReturnMap { f, plaque, k, rho: DEGREE_FIBER_RADIUS, half: DEGREE_CHART_HALF };
    let dom = BoxDomain::new(-DEGREE_CHART_HALF, DEGREE_CHART_HALF, 1)?;
    // holonomy failures are reported after the sweep
    let failed = std::cell::Cell::new(false);
    let hmap = |t: f64, v: [f64; 2]| -> (f64, [f64; 2]) {
        match h.eval(t, v[0]) {
            Ok((a, b)) => (a, [b, 0.0]),
            Err(_) => {
                failed.set(true);
                (f64::NAN, [f64::NAN, 0.0])
            }
        }
    };
    let report = boundary_hypotheses_check(&hmap, &dom, 256, 0.0);
    if failed.get() {
        return Err(PhError::HolonomyUndefined);
    }
    if !report.pass {
        return Err(PhError::ChartTooSmall);
    }
    let fp = degree_fixed_point(&hmap, &dom, 1e-12)?;
    if failed.get() {
        return Err(PhError::HolonomyUndefined);
    }
    let r_n = h.point(fp.t, fp.v[0]);
    // f^{-k} on the unstable leaf through r_n, projected back onto the leaf
    let eu = estimate_splitting(f, &Point3::new(r_n), DEFAULT_DEPTH)?.eu_vec().normalize();
    let mut p = r_n;
    for _ in 0..200 {
        let mut q = p;
        for _ in 0..k {
            q = f.inverse_lift(&q);
        }
        let d = log_map(&Point3::new(r_n), &Point3::new(q));
        let next = r_n + eu * d.dot(&eu);
        let moved = (next - p).norm();
        p = next;
        if moved < 1e-15 {
            break;
        }
    }
    let zero = VectorFieldSpec::constant([0.0, 0.0, 0.0]);
    let mut pt = Point3::new(p);
    if closing_residual(f, &zero, 0.0, &pt, k) > 1e-14 {
        pt = polish(f, &zero, 0.0, &pt, k);
    }
    let residual = closing_residual(f, &zero, 0.0, &pt, k);
    if residual >= 1e-9 {
        return Err(PhError::NotConverged(residual));
    }
    Ok(ClosingResult {
        tau: 0.0,
        p: pt,
        k,
        residual,
        dist_to_target: torus_distance(x, &pt),
        method: ClosingMethod::Degree,
        diagnostics: ClosingDiagnostics { s_n: nr.center_offset, boundary: Some(report), route: "degree".into(), ..Default::default() },
    })
}

/// Degree closing at the first orientation-reversing return of `x` within
/// `1/(2n)` whose chart satisfies the boundary hypotheses.
pub fn close_degree_at(f: &SystemInstance, x: &Point3, n: usize, opts: &ClosingOptions) -> PhResult<ClosingResult> {
    if n == 0 {
        return Err(PhError::ConfigInvalid("n must be positive".into()));
    }
    if let Some(k) = periodic_at(f, x, opts.k_max) {
        return Ok(none_needed(x, k, "degree"));
    }
    let mut last = PhError::NoReturnFound;
    for k in 1..=opts.k_max {
        let mut cands = scan_returns(f, x, k, 0.5 / n as f64, opts.starts, opts.seed);
        cands.sort_by(|a, b| a.center_offset.abs().partial_cmp(&b.center_offset.abs()).unwrap());
        for nr in cands {
            if nr.eps_return < 1e-12 {
                let zero = VectorFieldSpec::constant([0.0, 0.0, 0.0]);
                let mut r = none_needed(&nr.y, k, "degree");
                r.residual = closing_residual(f, &zero, 0.0, &nr.y, k);
                r.dist_to_target = torus_distance(x, &nr.y);
                return Ok(r);
            }
            if center_orientation_transport(f, &nr.y, k)? > 0 {
                continue;
            }
            match close_degree(f, x, &nr) {
                Ok(r) => return Ok(r),
                Err(e @ (PhError::ChartTooSmall | PhError::HolonomyUndefined)) => last = e,
                Err(e) => return Err(e),
            }
        }
    }
    Err(last)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClosingPolicy {
    /// Global route with the given field.
    Global { field: VectorFieldSpec },
    /// Local route with a bump of radius `r_u`.
    Local { r_u: f64 },
    /// Global route with the divergence-free tube field.
    Conservative,
}

/// Orientation-reversing returns go to [`close_degree`]; otherwise the
/// policy picks the perturbation route.
pub fn dispatch_close(f: &SystemInstance, x: &Point3, n: usize, policy: &ClosingPolicy, opts: &ClosingOptions) -> PhResult<ClosingResult> {
    if let Some(k) = periodic_at(f, x, opts.k_max) {
        return Ok(none_needed(x, k, "dispatch"));
    }
    let radius = 0.5 / n as f64;
    for k in 1..=opts.k_max {
        let cands = scan_returns(f, x, k, radius, opts.starts, opts.seed);
        let Some(nr) = cands.into_iter().min_by(|a, b| a.eps_return.partial_cmp(&b.eps_return).unwrap()) else {
            continue;
        };
        if center_orientation_transport(f, &nr.y, k)? < 0 {
            match close_degree(f, x, &nr) {
                Ok(r) => return Ok(r),
                Err(PhError::ChartTooSmall) | Err(PhError::HolonomyUndefined) => continue,
                Err(e) => return Err(e),
            }
        }
        break;
    }
    match policy {
        ClosingPolicy::Global { field } => close_global(f, x, field, n, opts),
        ClosingPolicy::Local { r_u } => close_local(f, x, *r_u, n, opts),
        ClosingPolicy::Conservative => {
            let field = global_divergence_free_field(f)?;
            let div = max_divergence(&field, 16, 1e-5);
            if div > 1e-6 {
                return Err(PhError::NotDivergenceFree(div));
            }
            let mut r = close_global(f, x, &field, n, opts)?;
            r.diagnostics.max_divergence = Some(div);
            r.diagnostics.det_deviation = Some(det_deviation(f, &field, r.tau, 1000, opts.seed));
            r.diagnostics.route = "conservative".into();
            Ok(r)
        }
    }
}

/// Largest `||det D(X_tau o f)| - 1|` at seeded points (central differences).
pub fn det_deviation(f: &SystemInstance, field: &VectorFieldSpec, tau: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let v = Vec3::new(rng.gen(), rng.gen(), rng.gen());
        let j = fd_jacobian(|w| flow_lift(field, tau, &f.eval_lift(w), FlowParams::for_tau(tau)), &v, 1e-6);
        worst = worst.max((j.determinant().abs() - 1.0).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{base_periodic_points, default_omega, MapSpec};
    use approx::assert_abs_diff_eq;

    fn quick() -> ClosingOptions {
        ClosingOptions { diagnostics: false, ..Default::default() }
    }

    #[test]
    fn product_closed_form() {
        let f = MapSpec::product().instance();
        let w = default_omega();
        for (b, k, n) in [([0.0, 0.0], 1usize, 2usize), ([0.2, 0.4], 2, 10)] {
            let x = Point3::xyz(b[0], b[1], 0.3);
            let r = close_global(&f, &x, &VectorFieldSpec::vertical(), n, &quick()).unwrap();
            let kw = k as f64 * w;
            assert_eq!(r.k, k);
            assert_abs_diff_eq!(r.tau, (kw.round() - kw) / k as f64, epsilon = 1e-9);
            assert!(r.residual < 1e-9);
        }
    }

    #[test]
    fn periodic_target_needs_nothing() {
        let f = MapSpec::reversing().instance();
        let p = Point3::xyz(0.0, 0.0, 0.5 * default_omega());
        let r = close_global(&f, &p, &VectorFieldSpec::vertical(), 5, &quick()).unwrap();
        assert_eq!(r.method, ClosingMethod::NoneNeeded);
        assert_eq!(r.tau, 0.0);
        assert_eq!(r.p, p);
    }

    #[test]
    fn skew_global_and_local() {
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.31, 0.47, 0.2);
        for n in [5, 10] {
            let g = close_global(&f, &x, &VectorFieldSpec::vertical(), n, &ClosingOptions::default()).unwrap();
            assert!(g.residual < 1e-9 && g.tau.abs() <= 1.0 / n as f64);
            assert!(g.dist_to_target <= (g.diagnostics.l_hat.unwrap() + 1.0) / n as f64 + 1e-6);
            let l = close_local(&f, &x, 0.1, n, &quick()).unwrap();
            assert!(l.residual < 1e-9 && l.tau.abs() <= 1.0 / n as f64);
            assert!(l.dist_to_target <= 1.0 / n as f64);
        }
    }

    #[test]
    fn reversing_degree_closed_form() {
        let f = MapSpec::reversing().instance();
        for k in [1usize, 3] {
            let b = base_periodic_points(k).unwrap()[0];
            let c = f.iterate(&Point3::xyz(b[0], b[1], 0.0), k).coords[2];
            let x = Point3::xyz(b[0], b[1], 0.5 * c + 0.04);
            let nr = crate::center_curves::near_return_at(&f, &x, k).unwrap();
            let r = close_degree(&f, &x, &nr).unwrap();
            assert_eq!(r.tau, 0.0);
            assert!(r.diagnostics.boundary.as_ref().unwrap().pass);
            let th = r.p.coords[2];
            // -theta + c = theta mod 1
            assert_abs_diff_eq!(wrap_signed(2.0 * th - c), 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn dispatch_routes() {
        let f = MapSpec::reversing().instance();
        let x = Point3::xyz(0.003, 0.001, 0.5 * default_omega() + 0.03);
        let r = dispatch_close(&f, &x, 10, &ClosingPolicy::Conservative, &quick()).unwrap();
        assert_eq!(r.method, ClosingMethod::Degree);
        let f = MapSpec::skew(0.05).instance();
        let x = Point3::xyz(0.31, 0.47, 0.2);
        let r = dispatch_close(&f, &x, 5, &ClosingPolicy::Conservative, &quick()).unwrap();
        assert_eq!(r.method, ClosingMethod::Global);
        assert!(r.diagnostics.det_deviation.unwrap() < 1e-6);
    }
}
