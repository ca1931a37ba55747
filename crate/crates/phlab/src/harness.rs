//! Experiment configuration, JSON-lines records and reporting. Everything
//! that touches the filesystem or the environment lives here.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::center_curves::{build_periodic_family, center_connection, near_return_at};
use crate::closing::{close_degree_at, close_global, close_local, det_deviation, ClosingOptions, ClosingResult};
use crate::degree::{boundary_hypotheses_check, degree_fixed_point, AdmissibleMap, BoundaryReport, BoxDomain, FixedPoint};
use crate::error::{PhError, PhResult};
use crate::geometry::Point3;
use crate::invariant_manifolds::{contraction_check, stable_graph, GraphKind, GraphOptions};
use crate::perturbation::{global_divergence_free_field, max_divergence, VectorFieldSpec};
use crate::shadowing::{
    invariant_section, lift_map, lipschitz_estimate, moving_forward_gap, su_conjugacy, su_foliation, BundleChart,
    LipschitzReport, SectionOptions, DEFAULT_DELTA1,
};
use crate::splitting::{
    build_adapted_metric, domination_constants, estimate_splitting, invariance_residual, metric_quality, DominationReport,
    DEFAULT_DEPTH,
};
use crate::systems::{MapSpec, SystemInstance};

pub const SCHEMA_VERSION: u32 = 1;
pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Overrides the directory of the output sink.
pub const OUT_DIR_ENV: &str = "PHLAB_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Splitting,
    Manifolds,
    Family,
    Shadow,
    CloseGlobal,
    CloseLocal,
    CloseDegree,
    Divfree,
    Suite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Bound on the splitting invariance residual. Required.
    pub splitting: f64,
    #[serde(default = "default_closing_tol")]
    pub closing: f64,
    #[serde(default = "default_degree_tol")]
    pub degree: f64,
}

fn default_closing_tol() -> f64 {
    1e-9
}

fn default_degree_tol() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub kind: ExperimentKind,
    pub system: MapSpec,
    pub seed: u64,
    pub tolerances: Tolerances,
    #[serde(default)]
    pub target: Option<[f64; 3]>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub field: Option<VectorFieldSpec>,
    /// Return time of the family for `family` and `shadow`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub taus: Vec<f64>,
    #[serde(default)]
    pub samples: Option<usize>,
    /// Support radius of the local bump field.
    #[serde(default)]
    pub r_u: Option<f64>,
    /// Output file; relative paths resolve against the output directory.
    #[serde(default)]
    pub output: Option<String>,
}

fn invalid(msg: impl Into<String>) -> PhError {
    PhError::ConfigInvalid(msg.into())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> PhResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> PhResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> PhResult<()> {
        if self.version != SCHEMA_VERSION {
            return Err(invalid(format!("schema version {} (expected {SCHEMA_VERSION})", self.version)));
        }
        self.system.validate()?;
        let t = &self.tolerances;
        if !(t.splitting > 0.0 && t.closing > 0.0 && t.degree > 0.0) {
            return Err(invalid("tolerances must be positive"));
        }
        if self.n.contains(&0) {
            return Err(invalid("n entries must be positive"));
        }
        let closing = matches!(self.kind, ExperimentKind::CloseGlobal | ExperimentKind::CloseLocal | ExperimentKind::CloseDegree);
        if closing && (self.n.is_empty() || self.target.is_none()) {
            return Err(invalid("closing experiments need a target and a non-empty n list"));
        }
        if self.taus.iter().any(|t| !t.is_finite()) {
            return Err(invalid("taus must be finite"));
        }
        if let Some(r) = self.r_u {
            if !(r > 0.0) {
                return Err(invalid("r_u must be positive"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn output_path(&self) -> PathBuf {
        let name = self.output.clone().unwrap_or_else(|| "records.jsonl".into());
        match std::env::var_os(OUT_DIR_ENV) {
            Some(dir) => {
                let file = Path::new(&name).file_name().map(PathBuf::from).unwrap_or_else(|| "records.jsonl".into());
                PathBuf::from(dir).join(file)
            }
            None => PathBuf::from(name),
        }
    }

    fn samples_or(&self, d: usize) -> usize {
        self.samples.unwrap_or(d)
    }

    fn target_point(&self) -> Point3 {
        let t = self.target.unwrap_or([0.0, 0.0, 0.1]);
        Point3::xyz(t[0], t[1], t[2])
    }

    fn closing_options(&self) -> ClosingOptions {
        ClosingOptions { seed: self.seed, tol: self.tolerances.closing, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub bound: f64,
}

impl Check {
    fn below(name: &str, value: f64, bound: f64) -> Self {
        Self { name: name.into(), pass: value < bound, value, bound }
    }

    fn above(name: &str, value: f64, bound: f64) -> Self {
        Self { name: name.into(), pass: value > bound, value, bound }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplittingSummary {
    pub domination: DominationReport,
    pub max_invariance_residual: f64,
    pub min_angle: f64,
    pub max_projection_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSummary {
    pub worst_ratio: f64,
    pub worst_offset: f64,
    pub max_slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySummary {
    pub k: usize,
    pub t0: f64,
    pub commutation_residual: f64,
    pub closed_legs: usize,
    /// `(leg, t, point)` samples for plotting.
    pub polylines: Vec<(usize, f64, [f64; 3])>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardRow {
    pub tau: f64,
    pub delta_hat: f64,
    pub advance_min: f64,
    pub advance_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowSummary {
    pub k: usize,
    pub lipschitz: LipschitzReport,
    pub moving_forward: Vec<ForwardRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivfreeSummary {
    pub max_divergence: f64,
    pub min_norm: f64,
    pub det_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RecordOutput {
    Splitting(SplittingSummary),
    Manifolds(ManifoldSummary),
    Family(FamilySummary),
    Shadow(ShadowSummary),
    Closing(ClosingResult),
    Divfree(DivfreeSummary),
    Suite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub library_version: String,
    pub started_ms: u64,
    pub finished_ms: u64,
    pub kind: ExperimentKind,
    pub system: MapSpec,
    pub n: Option<usize>,
    pub pass: bool,
    pub checks: Vec<Check>,
    pub error: Option<String>,
    pub output: Option<RecordOutput>,
}

impl RunRecord {
    /// Same record with the timestamps zeroed, for determinism comparisons.
    pub fn without_timestamps(&self) -> Self {
        Self { started_ms: 0, finished_ms: 0, ..self.clone() }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

type Outcome = PhResult<(Vec<Check>, Option<RecordOutput>)>;

fn record(cfg: &ExperimentConfig, hash: &str, n: Option<usize>, run: impl FnOnce() -> Outcome) -> RunRecord {
    let started_ms = now_ms();
    let (checks, error, output) = match run() {
        Ok((c, o)) => (c, None, o),
        Err(e) => (Vec::new(), Some(format!("{e:?}")), None),
    };
    RunRecord {
        config_hash: hash.into(),
        library_version: LIBRARY_VERSION.into(),
        started_ms,
        finished_ms: now_ms(),
        kind: cfg.kind,
        system: cfg.system,
        n,
        pass: error.is_none() && checks.iter().all(|c| c.pass),
        checks,
        error,
        output,
    }
}

fn random_points(seed: u64, count: usize) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Point3::xyz(rng.gen(), rng.gen(), rng.gen())).collect()
}

pub fn splitting_experiment(f: &SystemInstance, tol: f64, samples: usize, seed: u64) -> PhResult<(Vec<Check>, SplittingSummary)> {
    let pts = random_points(seed, samples);
    let frames = pts.iter().map(|p| estimate_splitting(f, p, DEFAULT_DEPTH)).collect::<PhResult<Vec<_>>>()?;
    let mut max_res: f64 = 0.0;
    for (fr, p) in frames.iter().zip(&pts) {
        let next = estimate_splitting(f, &f.eval(p), DEFAULT_DEPTH)?;
        max_res = max_res.max(invariance_residual(f, fr, &next));
    }
    let domination = domination_constants(f, &frames)?;
    let adapted = build_adapted_metric(&frames)?;
    let mut min_angle = f64::INFINITY;
    let mut max_proj: f64 = 0.0;
    for fr in &adapted {
        let q = metric_quality(fr)?;
        min_angle = min_angle.min(q.min_angle);
        max_proj = max_proj.max(q.max_projection_norm);
    }
    let checks = vec![
        Check::below("invariance_residual", max_res, tol),
        Check { name: "domination_chain".into(), pass: domination.chain_holds, value: domination.lambda, bound: 1.0 },
        Check::above("adapted_angle", min_angle, 1.0 - 1e-3),
        Check { name: "projection_norm".into(), pass: max_proj <= 2.0, value: max_proj, bound: 2.0 },
    ];
    Ok((checks, SplittingSummary { domination, max_invariance_residual: max_res, min_angle, max_projection_norm: max_proj }))
}

pub fn manifold_experiment(f: &SystemInstance, samples: usize, seed: u64) -> PhResult<(Vec<Check>, ManifoldSummary)> {
    let frames: Vec<_> = random_points(seed, samples.min(200))
        .iter()
        .map(|p| estimate_splitting(f, p, DEFAULT_DEPTH))
        .collect::<PhResult<_>>()?;
    let lambda = domination_constants(f, &frames)?.max_contraction_s;
    let mut s = ManifoldSummary { worst_ratio: 0.0, worst_offset: 0.0, max_slope: 0.0 };
    for p in random_points(seed ^ 1, samples) {
        let rep = contraction_check(f, &p, GraphKind::Stable, lambda, 10, GraphOptions::default())?;
        s.worst_ratio = s.worst_ratio.max(rep.worst_ratio);
        s.worst_offset = s.worst_offset.max(rep.worst_offset);
        let g = stable_graph(f, &p, GraphOptions::default())?;
        s.max_slope = s.max_slope.max(g.slope(0.0).abs());
    }
    let checks = vec![
        Check { name: "contraction_ratio".into(), pass: s.worst_ratio <= 1.05, value: s.worst_ratio, bound: 1.05 },
        Check::below("graph_offset", s.worst_offset, 1e-6),
        Check::below("slope_at_origin", s.max_slope, 1e-3),
    ];
    Ok((checks, s))
}

pub fn divfree_experiment(f: &SystemInstance, grid: usize, seed: u64) -> PhResult<(Vec<Check>, DivfreeSummary)> {
    let field = global_divergence_free_field(f)?;
    let div = max_divergence(&field, grid, 1e-5);
    let mut min_norm = f64::INFINITY;
    for i in 0..grid {
        for j in 0..grid {
            for l in 0..grid {
                let p = Point3::xyz(i as f64 / grid as f64, j as f64 / grid as f64, l as f64 / grid as f64);
                min_norm = min_norm.min(field.eval(&p).norm());
            }
        }
    }
    let det = det_deviation(f, &field, 0.01, 1000, seed);
    let checks = vec![
        Check::below("max_divergence", div, 1e-6),
        Check::above("min_norm", min_norm, 0.0),
        Check::below("det_deviation", det, 1e-6),
    ];
    Ok((checks, DivfreeSummary { max_divergence: div, min_norm, det_deviation: det }))
}

fn family_experiment(f: &SystemInstance, cfg: &ExperimentConfig) -> PhResult<(Vec<Check>, FamilySummary, BundleChart)> {
    let y = cfg.target_point();
    let k = cfg.k.unwrap_or(1);
    let conn = center_connection(f, &near_return_at(f, &y, k)?)?;
    let fam = build_periodic_family(f, &conn, 0.6)?;
    let chart = BundleChart::new(f, &fam, DEFAULT_DELTA1)?;
    let summary = FamilySummary {
        k: fam.k,
        t0: fam.t0,
        commutation_residual: fam.commutation_residual,
        closed_legs: fam.curves.iter().filter(|c| c.closure.is_some()).count(),
        polylines: fam.polylines(),
    };
    let checks = vec![Check::below("commutation_residual", fam.commutation_residual, 1e-6)];
    Ok((checks, summary, chart))
}

fn shadow_experiment(f: &SystemInstance, cfg: &ExperimentConfig) -> PhResult<(Vec<Check>, ShadowSummary)> {
    let (_, fam, chart) = family_experiment(f, cfg)?;
    let field = cfg.field.clone().unwrap_or_else(VectorFieldSpec::vertical);
    let taus = if cfg.taus.is_empty() { vec![1e-2, 1e-3, 1e-4, 1e-5] } else { cfg.taus.clone() };
    let lipschitz = lipschitz_estimate(&chart, f, &field, &taus)?;
    let fol = su_foliation(f, &chart, 0.05)?;
    let mut moving_forward = Vec::new();
    for &tau in &taus {
        let lm = lift_map(&chart, f, &field, tau);
        let sec = invariant_section(&lm, SectionOptions::default(), None)?;
        let conj = su_conjugacy(&chart, &fol, &sec, 16)?;
        let mf = moving_forward_gap(&lm, &fol, &conj)?;
        moving_forward.push(ForwardRow { tau, delta_hat: mf.delta_hat, advance_min: mf.advance_min, advance_max: mf.advance_max });
    }
    let mut checks = vec![Check::below("lipschitz_spread", lipschitz.spread, 2.0)];
    if field.class != crate::perturbation::TransversalityClass::None {
        let worst = moving_forward.iter().filter(|r| r.tau > 0.0).map(|r| r.delta_hat).fold(f64::INFINITY, f64::min);
        if worst.is_finite() {
            checks.push(Check::above("delta_hat", worst, 0.0));
        }
    }
    Ok((checks, ShadowSummary { k: fam.k, lipschitz, moving_forward }))
}

fn closing_checks(r: &ClosingResult, n: usize, tol: f64) -> Vec<Check> {
    let mut c = vec![
        Check::below("residual", r.residual, tol),
        Check { name: "tau_bound".into(), pass: r.tau.abs() <= 1.0 / n as f64, value: r.tau.abs(), bound: 1.0 / n as f64 },
    ];
    if let Some(l) = r.diagnostics.l_hat {
        let bound = (l + 1.0) / n as f64 + 1e-6;
        c.push(Check { name: "distance_bound".into(), pass: r.dist_to_target <= bound, value: r.dist_to_target, bound });
    }
    if let Some(b) = &r.diagnostics.boundary {
        c.push(Check { name: "boundary_hypotheses".into(), pass: b.pass, value: b.slack_a.min(b.slack_b).min(b.slack_h2), bound: 0.0 });
    }
    c
}

fn degree_suite_checks(seed: u64, count: usize, tol: f64) -> Vec<Check> {
    let mut worst: f64 = 0.0;
    let mut degree_ok = true;
    let mut failures = 0;
    for i in 0..count {
        let s = 1 + i % 2;
        let dom = BoxDomain::new(-1.0, 1.0, s).expect("valid box");
        let m = AdmissibleMap::random(dom, seed.wrapping_add(i as u64));
        let h = |t: f64, v: [f64; 2]| m.eval(t, v);
        match degree_fixed_point(&h, &dom, 1e-12) {
            Ok(fp) => {
                worst = worst.max(fp.residual);
                degree_ok &= fp.initial_degree == 1;
            }
            Err(_) => failures += 1,
        }
    }
    vec![
        Check::below("degree_residual", worst, tol),
        Check { name: "degree_one".into(), pass: degree_ok && failures == 0, value: failures as f64, bound: 0.0 },
    ]
}

/// Runs the experiment; domain errors become failed records and the n list
/// is always exhausted.
pub fn run_experiment(cfg: &ExperimentConfig) -> PhResult<Vec<RunRecord>> {
    cfg.validate()?;
    let hash = cfg.hash();
    let f = cfg.system.instance();
    let tol = &cfg.tolerances;
    let mut out = Vec::new();
    match cfg.kind {
        ExperimentKind::Splitting => out.push(record(cfg, &hash, None, || {
            let (c, s) = splitting_experiment(&f, tol.splitting, cfg.samples_or(1000), cfg.seed)?;
            Ok((c, Some(RecordOutput::Splitting(s))))
        })),
        ExperimentKind::Manifolds => out.push(record(cfg, &hash, None, || {
            let (c, s) = manifold_experiment(&f, cfg.samples_or(20), cfg.seed)?;
            Ok((c, Some(RecordOutput::Manifolds(s))))
        })),
        ExperimentKind::Family => out.push(record(cfg, &hash, None, || {
            let (c, s, _) = family_experiment(&f, cfg)?;
            Ok((c, Some(RecordOutput::Family(s))))
        })),
        ExperimentKind::Shadow => out.push(record(cfg, &hash, None, || {
            let (c, s) = shadow_experiment(&f, cfg)?;
            Ok((c, Some(RecordOutput::Shadow(s))))
        })),
        ExperimentKind::Divfree => out.push(record(cfg, &hash, None, || {
            let (c, s) = divfree_experiment(&f, cfg.samples_or(32), cfg.seed)?;
            Ok((c, Some(RecordOutput::Divfree(s))))
        })),
        ExperimentKind::CloseGlobal | ExperimentKind::CloseLocal | ExperimentKind::CloseDegree => {
            let x = cfg.target_point();
            let opts = cfg.closing_options();
            let field = cfg.field.clone().unwrap_or_else(VectorFieldSpec::vertical);
            for &n in &cfg.n {
                out.push(record(cfg, &hash, Some(n), || {
                    let r = match cfg.kind {
                        ExperimentKind::CloseGlobal => close_global(&f, &x, &field, n, &opts)?,
                        ExperimentKind::CloseLocal => close_local(&f, &x, cfg.r_u.unwrap_or(0.1), n, &opts)?,
                        _ => close_degree_at(&f, &x, n, &opts)?,
                    };
                    Ok((closing_checks(&r, n, tol.closing), Some(RecordOutput::Closing(r))))
                }));
            }
        }
        ExperimentKind::Suite => out.push(record(cfg, &hash, None, || {
            let mut checks = Vec::new();
            let prefixed = |name: &str, cs: Vec<Check>| -> Vec<Check> {
                cs.into_iter().map(|c| Check { name: format!("{name}.{}", c.name), ..c }).collect()
            };
            checks.extend(prefixed("splitting", splitting_experiment(&f, tol.splitting, cfg.samples_or(200), cfg.seed)?.0));
            checks.extend(prefixed("manifolds", manifold_experiment(&f, 5, cfg.seed)?.0));
            // no positively transverse cycle exists when the fiber is reversed
            if f.fiber_sign() > 0.0 {
                checks.extend(prefixed("divfree", divfree_experiment(&f, 16, cfg.seed)?.0));
            }
            checks.extend(prefixed("degree", degree_suite_checks(cfg.seed, 20, tol.degree)));
            Ok((checks, Some(RecordOutput::Suite)))
        })),
    }
    Ok(out)
}

/// Appends records to the sink, one JSON document per line.
pub fn append_records(path: &Path, records: &[RunRecord]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> anyhow::Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(anyhow::Error::from))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClosingRow {
    pub kind: Option<ExperimentKind>,
    pub n: usize,
    pub tau: f64,
    pub residual: f64,
    pub dist: f64,
    pub delta_hat: Option<f64>,
    pub l_hat: Option<f64>,
    pub k: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub closing: Vec<ClosingRow>,
    pub lipschitz: Vec<(f64, f64, f64)>,
    pub failures: Vec<String>,
}

impl Summary {
    pub fn closing_csv(&self) -> String {
        let mut s = String::from("n,tau,residual,dist\n");
        for r in &self.closing {
            let _ = writeln!(s, "{},{:.17e},{:.6e},{:.17e}", r.n, r.tau, r.residual, r.dist);
        }
        s
    }

    pub fn lipschitz_csv(&self) -> String {
        let mut s = String::from("tau,sup_norm,ratio\n");
        for (t, n, r) in &self.lipschitz {
            let _ = writeln!(s, "{t:.6e},{n:.17e},{r:.17e}");
        }
        s
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        if !self.closing.is_empty() {
            let _ = writeln!(s, "{:<13} {:>4} {:>3} {:>14} {:>10} {:>12} {:>12} {:>12}", "kind", "n", "k", "tau", "residual", "dist", "delta_hat", "l_hat");
            for r in &self.closing {
                let kind = r.kind.map(|k| format!("{k:?}")).unwrap_or_default();
                let opt = |v: Option<f64>| v.map(|v| format!("{v:.4e}")).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    s,
                    "{:<13} {:>4} {:>3} {:>14.6e} {:>10.2e} {:>12.4e} {:>12} {:>12}",
                    kind,
                    r.n,
                    r.k,
                    r.tau,
                    r.residual,
                    r.dist,
                    opt(r.delta_hat),
                    opt(r.l_hat)
                );
            }
        }
        if !self.lipschitz.is_empty() {
            let _ = writeln!(s, "{:>10} {:>14} {:>14}", "tau", "sup_norm", "ratio");
            for (t, n, r) in &self.lipschitz {
                let _ = writeln!(s, "{t:>10.1e} {n:>14.6e} {r:>14.6e}");
            }
        }
        for f in &self.failures {
            let _ = writeln!(s, "FAILED {f}");
        }
        s
    }
}

pub fn report(records: &[RunRecord]) -> Summary {
    let mut out = Summary::default();
    for r in records {
        match &r.output {
            Some(RecordOutput::Closing(c)) => out.closing.push(ClosingRow {
                kind: Some(r.kind),
                n: r.n.unwrap_or(0),
                tau: c.tau,
                residual: c.residual,
                dist: c.dist_to_target,
                delta_hat: c.diagnostics.delta_hat,
                l_hat: c.diagnostics.l_hat,
                k: c.k,
            }),
            Some(RecordOutput::Shadow(s)) => {
                out.lipschitz.extend(s.lipschitz.rows.iter().map(|row| (row.tau, row.sup_norm, row.ratio)))
            }
            _ => {}
        }
        if !r.pass {
            out.failures.push(failure_line(r));
        }
    }
    out
}

fn failure_line(r: &RunRecord) -> String {
    let mut s = format!("{:?}", r.kind);
    if let Some(n) = r.n {
        let _ = write!(s, " n={n}");
    }
    if let Some(e) = &r.error {
        let _ = write!(s, " error={e}");
    }
    for c in r.checks.iter().filter(|c| !c.pass) {
        let _ = write!(s, " {}={:.3e} (bound {:.3e})", c.name, c.value, c.bound);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub pass: bool,
    pub failures: Vec<String>,
}

pub fn verify_suite(cfg: &ExperimentConfig) -> PhResult<(VerifyOutcome, Vec<RunRecord>)> {
    let records = run_experiment(cfg)?;
    let failures: Vec<String> = records.iter().filter(|r| !r.pass).map(failure_line).collect();
    Ok((VerifyOutcome { pass: failures.is_empty(), failures }, records))
}

/// Monomial `coef * t^p0 * v1^p1 * v2^p2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Term {
    pub coef: f64,
    pub pow: [u32; 3],
}

/// User-supplied polynomial map `(t, v) -> (h1, h2)` on a box domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialMap {
    pub a: f64,
    pub b: f64,
    pub s: usize,
    pub h1: Vec<Term>,
    pub h2: Vec<Vec<Term>>,
    #[serde(default = "default_fixed_tol")]
    pub tol: f64,
}

fn default_fixed_tol() -> f64 {
    1e-12
}

fn poly(terms: &[Term], t: f64, v: [f64; 2]) -> f64 {
    terms.iter().map(|m| m.coef * t.powi(m.pow[0] as i32) * v[0].powi(m.pow[1] as i32) * v[1].powi(m.pow[2] as i32)).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeOutcome {
    pub boundary: BoundaryReport,
    pub fixed_point: Option<FixedPoint>,
    pub error: Option<String>,
}

impl PolynomialMap {
    pub fn parse(text: &str) -> PhResult<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| invalid(e.to_string()))?;
        BoxDomain::new(m.a, m.b, m.s)?;
        if m.h2.len() != m.s {
            return Err(invalid(format!("h2 has {} components, expected {}", m.h2.len(), m.s)));
        }
        Ok(m)
    }

    pub fn eval(&self, t: f64, v: [f64; 2]) -> (f64, [f64; 2]) {
        let mut h2 = [0.0; 2];
        for (i, c) in self.h2.iter().enumerate() {
            h2[i] = poly(c, t, v);
        }
        (poly(&self.h1, t, v), h2)
    }

    pub fn solve(&self) -> DegreeOutcome {
        let dom = BoxDomain::new(self.a, self.b, self.s).expect("validated on parse");
        let h = |t: f64, v: [f64; 2]| self.eval(t, v);
        let boundary = boundary_hypotheses_check(&h, &dom, 256, 0.0);
        match degree_fixed_point(&h, &dom, self.tol) {
            Ok(fp) => DegreeOutcome { boundary, fixed_point: Some(fp), error: None },
            Err(e) => DegreeOutcome { boundary, fixed_point: None, error: Some(format!("{e:?}")) },
        }
    }
}
