//! Run configuration, the staged pipeline, reports and output files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::measure_lab::{
    arc_boxes, jacobian_counterexample, verify_locality, verify_null_projection, BoxSet, CounterexampleRecord,
    GridField, LipschitzMap, LocalityResult, NullProjectionReport,
};
use crate::mesh_fem::{build_mesh, distance_field, field_to_csv, mesh_to_string, unit_square, DiscreteField, FemSpace, Mesh, Point};
use crate::plap_core::{first_eigenpair, PlapConfig};
use crate::problem_def::{
    check_conditions, check_hypotheses_f, check_hypotheses_g, default_f_grid, default_sigma, estimate_lf,
    estimate_lg, BoxPiece, C0Branch, ConditionReport, HypothesisReport, NonlinearitySpec, Piece1d, Piecewise1d,
};
use crate::regularization::{
    compute_growth_constants, growth_bounds_check, truncate_f, GrowthConstants, GrowthReport, RegularizedReactions,
};
use crate::scheme::{
    build_subsolution, default_schedule, identity_residual, recover_reaction_fields, run_continuation,
    strong_residual_check, verify_subsolution, ContinuationTrace, SchemeConfig, StrongResidualStats,
    StrongSolutionSummary, SubsolutionSummary, TraceSummary,
};

/// The demonstration problem.
pub const DEMO_CONFIG: &str = include_str!("../configs/demo.toml");

/// Sub-solution margins below this fail the gate.
pub const SUBSOLUTION_TOL: f64 = 1e-9;
/// Largest admissible fraction of bracket violations.
pub const BRACKET_FRACTION: f64 = 0.01;
/// Largest admissible growth-bound violation.
pub const GROWTH_TOL: f64 = 1e-9;
/// Uniform-bound thresholds for `‖u_ε‖_∞` and `‖∇u_ε‖_∞` across the trace.
pub const SUP_RATIO_MAX: f64 = 1.5;
pub const GRAD_RATIO_MAX: f64 = 2.0;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    validation_mode: Option<bool>,
    output: Option<PathBuf>,
    domain: Option<RawDomain>,
    problem: RawProblem,
    schedule: Option<RawSchedule>,
    tolerances: Option<RawTolerances>,
    checks: Option<RawChecks>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDomain {
    polygon: Option<Vec<[f64; 2]>>,
    h: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    p: f64,
    gamma: Option<f64>,
    f: RawScalar,
    g: RawVector,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawScalar {
    Expr(String),
    Table(RawScalarTable),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScalarTable {
    pieces: Vec<RawPiece>,
    discontinuities: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPiece {
    from: Option<f64>,
    expr: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawVector {
    Expr(String),
    Table(RawVectorTable),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVectorTable {
    dim: Option<usize>,
    expr: Option<String>,
    product: Option<Vec<RawFactor>>,
    boxes: Option<Vec<RawBox>>,
    declared: Option<Vec<Vec<[f64; 2]>>>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawFactor {
    Expr(String),
    Table(RawFactorTable),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFactorTable {
    pieces: Vec<RawPiece>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
    expr: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    steps: Option<usize>,
    values: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTolerances {
    solver: Option<f64>,
    outer: Option<f64>,
    comparison: Option<f64>,
    bracket: Option<f64>,
    tol_dist: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChecks {
    growth_samples: Option<usize>,
    min_distance: Option<f64>,
}

/// The ε schedule of the continuation.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    /// `ε_k = δ/2^{k+1}`, `k < steps`.
    Auto { steps: usize },
    Explicit { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tolerances {
    /// Relative residual of each p-Laplace solve.
    pub solver: f64,
    /// Stopping threshold of the regularized fixed point.
    pub outer: f64,
    pub comparison: f64,
    pub bracket: f64,
    /// Exclusion radius around the declared sets; `None` means `ε_final`.
    pub tol_dist: Option<f64>,
}

/// A validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub polygon: Vec<Point>,
    pub h: f64,
    pub p: f64,
    pub gamma: Option<f64>,
    pub f: NonlinearitySpec,
    pub g: NonlinearitySpec,
    pub schedule: ScheduleSpec,
    pub tolerances: Tolerances,
    pub validation_mode: bool,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub growth_samples: usize,
    /// Boundary distance below which the strong residual is not evaluated.
    pub min_distance: f64,
    /// SHA-256 of the configuration text.
    pub source_hash: String,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.chars().count(), |k| before[k + 1..].chars().count()) + 1;
    (line, col)
}

fn expr_at(field: &str, src: &str) -> Result<Expr> {
    Expr::parse(src).map_err(|e| Error::constraint(field, format!("`{src}`: {e}")))
}

fn pieces_1d(field: &str, raw: &[RawPiece], lower: f64) -> Result<Vec<Piece1d>> {
    if raw.is_empty() {
        return Err(Error::constraint(field, "needs at least one piece"));
    }
    let mut out = Vec::with_capacity(raw.len());
    for (k, piece) in raw.iter().enumerate() {
        let lo = match (k, piece.from) {
            (0, None) => lower,
            (0, Some(v)) if v == lower => lower,
            (0, Some(v)) => return Err(Error::constraint(field, format!("first piece must start at {lower}, found {v}"))),
            (_, Some(v)) => v,
            (_, None) => return Err(Error::constraint(field, format!("piece {k} needs `from`"))),
        };
        let hi = raw.get(k + 1).and_then(|p| p.from).unwrap_or(f64::INFINITY);
        out.push(Piece1d {
            lo,
            hi,
            expr: expr_at(field, &piece.expr)?,
        });
    }
    Ok(out)
}

fn scalar_spec(raw: &RawScalar, gamma: Option<f64>) -> Result<NonlinearitySpec> {
    let field = "problem.f";
    let spec = match raw {
        RawScalar::Expr(src) => {
            expr_at(field, src)?;
            NonlinearitySpec::scalar_expr(src, gamma)
        }
        RawScalar::Table(t) => NonlinearitySpec::scalar(
            pieces_1d(field, &t.pieces, 0.0)?,
            t.discontinuities.clone().unwrap_or_default(),
            gamma,
        ),
    };
    spec.map_err(|e| match e {
        Error::Constraint { .. } => e,
        other => Error::constraint(field, other.to_string()),
    })
}

fn vector_spec(raw: &RawVector) -> Result<NonlinearitySpec> {
    let field = "problem.g";
    let spec = match raw {
        RawVector::Expr(src) => {
            expr_at(field, src)?;
            NonlinearitySpec::vector_expr(2, src)
        }
        RawVector::Table(t) => {
            let dim = t.dim.unwrap_or(2);
            let declared: Vec<Vec<(f64, f64)>> = t
                .declared
                .as_ref()
                .map(|axes| axes.iter().map(|a| a.iter().map(|iv| (iv[0], iv[1])).collect()).collect())
                .unwrap_or_default();
            match (&t.expr, &t.product, &t.boxes) {
                (Some(src), None, None) => {
                    expr_at(field, src)?;
                    NonlinearitySpec::vector_expr(dim, src)
                }
                (None, Some(factors), None) => {
                    let fs = factors
                        .iter()
                        .map(|f| match f {
                            RawFactor::Expr(src) => Ok(Piecewise1d::single(expr_at(field, src)?, f64::NEG_INFINITY)),
                            RawFactor::Table(t) => {
                                Piecewise1d::new(pieces_1d(field, &t.pieces, f64::NEG_INFINITY)?, f64::NEG_INFINITY)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    NonlinearitySpec::product(fs, declared)
                }
                (None, None, Some(boxes)) => {
                    let pieces = boxes
                        .iter()
                        .map(|b| {
                            Ok(BoxPiece {
                                lo: b.lo.clone(),
                                hi: b.hi.clone(),
                                expr: expr_at(field, &b.expr)?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    NonlinearitySpec::vector_boxes(dim, pieces, declared)
                }
                _ => return Err(Error::constraint(field, "give exactly one of `expr`, `product`, `boxes`")),
            }
        }
    };
    let spec = spec.map_err(|e| match e {
        Error::Constraint { .. } => e,
        other => Error::constraint(field, other.to_string()),
    })?;
    if spec.dim() != 2 {
        return Err(Error::constraint(field, format!("the domain is planar, so g needs 2 arguments, not {}", spec.dim())));
    }
    Ok(spec)
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::constraint(field, format!("must be positive, got {v}")))
    }
}

/// Parses and validates a configuration given as TOML text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    parse_config_with(text, false)
}

/// As [`parse_config_str`]; `force_validation` turns validation mode on
/// whatever the file says.
pub fn parse_config_with(text: &str, force_validation: bool) -> Result<RunConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        Error::Parse {
            line,
            column,
            message: e.message().to_owned(),
        }
    })?;
    let validation_mode = force_validation || raw.validation_mode.unwrap_or(false);
    let p = raw.problem.p;
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::constraint("problem.p", format!("must satisfy 1 < p < N = 2, got {p}")));
    }
    if p >= 2.0 && !validation_mode {
        return Err(Error::constraint(
            "problem.p",
            format!("{p} violates 1 < p < N = 2; set validation_mode = true for p ≥ 2"),
        ));
    }
    let gamma = raw.problem.gamma;
    if let Some(g) = gamma {
        if !(g > 0.0 && g < 1.0) {
            return Err(Error::constraint("problem.gamma", format!("must lie in (0,1), got {g}")));
        }
    }
    let mut f = scalar_spec(&raw.problem.f, gamma)?;
    let mut g = vector_spec(&raw.problem.g)?;
    for (name, spec) in [("problem.f", &mut f), ("problem.g", &mut g)] {
        spec.bind("p", p);
        if let Some(bad) = spec.unbound_params().into_iter().find(|n| n != "lambda1") {
            return Err(Error::constraint(name, format!("unknown parameter `{bad}` (allowed: p, lambda1, pi)")));
        }
    }

    let domain = raw.domain.unwrap_or(RawDomain { polygon: None, h: None });
    let polygon = domain.polygon.unwrap_or_else(unit_square);
    let h = positive("domain.h", domain.h.unwrap_or(1.0 / 16.0))?;

    let schedule = match raw.schedule {
        None => ScheduleSpec::Auto { steps: 4 },
        Some(RawSchedule { steps, values: None }) => {
            let steps = steps.unwrap_or(4);
            if steps < 2 {
                return Err(Error::constraint("schedule.steps", "needs at least 2 steps"));
            }
            ScheduleSpec::Auto { steps }
        }
        Some(RawSchedule { steps: None, values: Some(v) }) => {
            if v.len() < 2 || v.iter().any(|&e| !(e > 0.0 && e < 1.0)) || v.windows(2).any(|w| !(w[1] < w[0])) {
                return Err(Error::constraint(
                    "schedule.values",
                    "needs at least two values in (0,1), strictly decreasing",
                ));
            }
            ScheduleSpec::Explicit { values: v }
        }
        Some(_) => return Err(Error::constraint("schedule", "give either `steps` or `values`")),
    };

    let t = raw.tolerances.unwrap_or(RawTolerances {
        solver: None,
        outer: None,
        comparison: None,
        bracket: None,
        tol_dist: None,
    });
    let tolerances = Tolerances {
        solver: positive("tolerances.solver", t.solver.unwrap_or(1e-10))?,
        outer: positive("tolerances.outer", t.outer.unwrap_or(1e-8))?,
        comparison: positive("tolerances.comparison", t.comparison.unwrap_or(1e-8))?,
        bracket: positive("tolerances.bracket", t.bracket.unwrap_or(1e-6))?,
        tol_dist: t.tol_dist.map(|v| positive("tolerances.tol_dist", v)).transpose()?,
    };
    let checks = raw.checks.unwrap_or(RawChecks {
        growth_samples: None,
        min_distance: None,
    });
    let min_distance = checks.min_distance.unwrap_or(0.1);
    if !(min_distance >= 0.0) {
        return Err(Error::constraint("checks.min_distance", "must be nonnegative"));
    }
    Ok(RunConfig {
        polygon,
        h,
        p,
        gamma,
        f,
        g,
        schedule,
        tolerances,
        validation_mode,
        output: raw.output,
        seed: raw.seed.unwrap_or(0),
        growth_samples: checks.growth_samples.unwrap_or(10_000),
        min_distance,
        source_hash: hex::encode(Sha256::digest(text.as_bytes())),
    })
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    read_config(path, false)
}

pub fn read_config(path: &Path, force_validation: bool) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_with(&text, force_validation)
}

impl RunConfig {
    /// The demonstration problem.
    pub fn demo() -> RunConfig {
        parse_config_str(DEMO_CONFIG).expect("demo config is valid")
    }

    fn plap(&self) -> PlapConfig {
        PlapConfig {
            tol_residual: self.tolerances.solver,
            validation_mode: self.validation_mode,
            ..PlapConfig::new(self.p)
        }
    }
}

/// How far a run goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Eig,
    Check,
    Subsol,
    Solve,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateRecord {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    GateFailure { gate: String },
    SolverFailure { message: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub source_sha256: String,
    pub stage: Stage,
    pub h: f64,
    pub p: f64,
    pub gamma: Option<f64>,
    pub seed: u64,
    pub validation_mode: bool,
    pub schedule: ScheduleSpec,
    pub tolerances: Tolerances,
    pub growth_samples: usize,
    pub min_distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeshSummary {
    pub vertices: usize,
    pub triangles: usize,
    pub h: f64,
    pub max_angle: f64,
    pub degraded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EigenSummary {
    pub lambda1: f64,
    pub iterations: usize,
    pub residual: f64,
    pub sup_norm: f64,
    pub grad_sup_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsolutionReport {
    #[serde(flatten)]
    pub summary: SubsolutionSummary,
    pub margin: f64,
    pub identity_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthSection {
    pub epsilon: f64,
    pub constants: GrowthConstants,
    pub report: GrowthReport,
}

/// Strong-residual statistics without the per-vertex field.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualSummary {
    pub percentile90: f64,
    pub median: f64,
    pub max: f64,
    pub evaluated: usize,
    pub excluded_f_fraction: f64,
    pub excluded_g_fraction: f64,
    pub forced_zero_checked: usize,
    pub forced_zero_failed: usize,
    pub tol_dist: f64,
    pub min_distance: f64,
}

impl From<&StrongResidualStats> for ResidualSummary {
    fn from(s: &StrongResidualStats) -> Self {
        ResidualSummary {
            percentile90: s.percentile90,
            median: s.median,
            max: s.max,
            evaluated: s.evaluated,
            excluded_f_fraction: s.excluded_f_fraction,
            excluded_g_fraction: s.excluded_g_fraction,
            forced_zero_checked: s.forced_zero_checked,
            forced_zero_failed: s.forced_zero_failed,
            tol_dist: s.tol_dist,
            min_distance: s.min_distance,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub splap_core: &'static str,
    pub report_format: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub stage: String,
    pub seconds: f64,
}

/// Fields kept for the output files.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub mesh: Option<Arc<Mesh>>,
    pub eigenfunction: Option<DiscreteField>,
    pub subsolution: Option<DiscreteField>,
    pub trace: Option<ContinuationTrace>,
    pub u: Option<DiscreteField>,
    pub residual_field: Option<Vec<Option<f64>>>,
}

/// Everything a run produced. Serializes to `report.json`; timings and
/// fields are written separately.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub outcome: Outcome,
    pub gates: Vec<GateRecord>,
    pub config: ConfigEcho,
    pub mesh: Option<MeshSummary>,
    pub eigenpair: Option<EigenSummary>,
    pub hypotheses_f: Option<HypothesisReport>,
    pub hypotheses_g: Option<HypothesisReport>,
    pub conditions: Option<ConditionReport>,
    pub subsolution: Option<SubsolutionReport>,
    pub trace: Option<TraceSummary>,
    pub growth: Option<GrowthSection>,
    pub strong_solution: Option<StrongSolutionSummary>,
    pub strong_residual: Option<ResidualSummary>,
    pub versions: Versions,
    #[serde(skip)]
    pub timings: Vec<Timing>,
    #[serde(skip)]
    pub artifacts: Artifacts,
}

impl RunReport {
    fn new(cfg: &RunConfig, stage: Stage) -> Self {
        RunReport {
            outcome: Outcome::Pass,
            gates: Vec::new(),
            config: ConfigEcho {
                source_sha256: cfg.source_hash.clone(),
                stage,
                h: cfg.h,
                p: cfg.p,
                gamma: cfg.gamma,
                seed: cfg.seed,
                validation_mode: cfg.validation_mode,
                schedule: cfg.schedule.clone(),
                tolerances: cfg.tolerances.clone(),
                growth_samples: cfg.growth_samples,
                min_distance: cfg.min_distance,
            },
            mesh: None,
            eigenpair: None,
            hypotheses_f: None,
            hypotheses_g: None,
            conditions: None,
            subsolution: None,
            trace: None,
            growth: None,
            strong_solution: None,
            strong_residual: None,
            versions: Versions {
                splap_core: env!("CARGO_PKG_VERSION"),
                report_format: 1,
            },
            timings: Vec::new(),
            artifacts: Artifacts::default(),
        }
    }

    /// Records a gate; the first failure decides the outcome.
    fn gate(&mut self, name: &str, passed: bool, detail: String) -> bool {
        if !passed && self.outcome == Outcome::Pass {
            self.outcome = Outcome::GateFailure { gate: name.into() };
        }
        self.gates.push(GateRecord {
            name: name.into(),
            passed,
            detail,
        });
        passed
    }

    pub fn passed(&self) -> bool {
        self.outcome == Outcome::Pass
    }

    pub fn gate_named(&self, name: &str) -> Option<&GateRecord> {
        self.gates.iter().find(|g| g.name == name)
    }

    fn time(&mut self, stage: &str, start: Instant) {
        self.timings.push(Timing {
            stage: stage.into(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
}

/// Gates in the order they are evaluated. The first four stop the run when
/// they fail.
pub const GATE_ORDER: [&str; 8] = [
    "hypotheses",
    "coercivity",
    "small_solution",
    "subsolution",
    "comparison",
    "uniform_bounds",
    "growth_bounds",
    "brackets",
];

/// Runs the pipeline: check, eigenpair, sub-solution, continuation,
/// recovery, strong residual.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    run_stages(cfg, Stage::Solve)
}

/// Runs independent configurations concurrently; results keep the input order.
pub fn run_sweep(cfgs: &[RunConfig]) -> Vec<Result<RunReport>> {
    cfgs.par_iter().map(run_pipeline).collect()
}

/// Runs the pipeline up to `stage`.
pub fn run_stages(cfg: &RunConfig, stage: Stage) -> Result<RunReport> {
    let mut rep = RunReport::new(cfg, stage);
    let p = cfg.p;
    let plap = cfg.plap();
    plap.validate()?;

    let t = Instant::now();
    let mesh = Arc::new(build_mesh(&cfg.polygon, cfg.h)?);
    let space = FemSpace::new(Arc::clone(&mesh))?;
    rep.mesh = Some(MeshSummary {
        vertices: mesh.n_vertices(),
        triangles: mesh.n_triangles(),
        h: mesh.h(),
        max_angle: mesh.max_angle(),
        degraded: mesh.is_degraded(),
    });
    rep.artifacts.mesh = Some(Arc::clone(&mesh));
    rep.time("mesh", t);

    let t = Instant::now();
    let eig = first_eigenpair(&plap, &space)?;
    let lambda1 = eig.lambda1;
    rep.eigenpair = Some(EigenSummary {
        lambda1,
        iterations: eig.iterations,
        residual: eig.residual,
        sup_norm: eig.phi1.sup_norm(),
        grad_sup_norm: eig.phi1.grad_sup_norm(),
    });
    rep.artifacts.eigenfunction = Some(eig.phi1.clone());
    rep.time("eigenpair", t);
    if stage == Stage::Eig {
        return Ok(rep);
    }

    let t = Instant::now();
    let (mut f, mut g) = (cfg.f.clone(), cfg.g.clone());
    f.bind("lambda1", lambda1);
    g.bind("lambda1", lambda1);
    f.validate()?;
    g.validate()?;
    let hf = check_hypotheses_f(&f, &default_f_grid(&f))?;
    let hg = check_hypotheses_g(&g)?;
    let ok = hf.all() && hg.all();
    let detail = format!("f flags {:?}, g flags {:?}", hf.flags, hg.flags);
    let gamma = cfg.gamma.or(hf.gamma_used);
    rep.hypotheses_f = Some(hf);
    rep.hypotheses_g = Some(hg);
    if !rep.gate("hypotheses", ok, detail) {
        return Ok(rep);
    }

    let (lf, _) = estimate_lf(&f, p);
    let (lg, _) = estimate_lg(&g, p);
    let sigma = default_sigma(lf, lg, lambda1, p).unwrap_or(0.0);
    let cond = check_conditions(&f, &g, lambda1, p, sigma)?;
    let margin = cond.coercivity_margin;
    let branch = cond.c0_branch;
    rep.conditions = Some(cond.clone());
    rep.time("check", t);
    if !rep.gate(
        "coercivity",
        margin > 0.0,
        format!("margin {margin:.6e} at sigma {sigma:.3e} (Lf {lf:.4e}, Lg {lg:.4e})"),
    ) {
        return Ok(rep);
    }
    if !rep.gate(
        "small_solution",
        matches!(branch, C0Branch::FBranch | C0Branch::GBranch),
        format!("{branch:?}"),
    ) {
        return Ok(rep);
    }
    if stage == Stage::Check {
        return Ok(rep);
    }

    let t = Instant::now();
    let sub = match build_subsolution(&cond, &eig, &f, &g) {
        Ok(s) => s,
        Err(Error::Construction { message, trace }) => {
            let last = trace.last().cloned().unwrap_or_default();
            rep.gate("subsolution", false, format!("{message}; last scan entry: {last}"));
            return Ok(rep);
        }
        Err(e) => return Err(e),
    };
    let sub_margin = verify_subsolution(&sub, &f, &g, plap.tau)?;
    rep.subsolution = Some(SubsolutionReport {
        summary: sub.summary(),
        margin: sub_margin,
        identity_residual: identity_residual(&sub, plap.tau)?,
    });
    rep.artifacts.subsolution = Some(sub.field.clone());
    rep.time("subsolution", t);
    if !rep.gate(
        "subsolution",
        sub_margin >= -SUBSOLUTION_TOL,
        format!("worst nodal margin {sub_margin:.3e}"),
    ) || stage == Stage::Subsol
    {
        return Ok(rep);
    }

    let t = Instant::now();
    let schedule = match &cfg.schedule {
        ScheduleSpec::Auto { steps } => default_schedule(sub.delta, *steps),
        ScheduleSpec::Explicit { values } => values.clone(),
    };
    let scheme = SchemeConfig {
        plap: PlapConfig {
            newton: true,
            ..plap.clone()
        },
        tol: cfg.tolerances.outer,
        max_outer: 200,
    };
    let trace = run_continuation(&schedule, &sub, &f, &g, margin, &scheme)?;
    rep.trace = Some(trace.summary());
    rep.time("continuation", t);
    if let Some(msg) = &trace.failure {
        rep.outcome = Outcome::SolverFailure { message: msg.clone() };
        rep.artifacts.trace = Some(trace);
        return Ok(rep);
    }
    let last = trace.records.last().expect("a successful continuation has records");
    let eps_final = last.epsilon;
    rep.artifacts.u = Some(last.u_eps.clone());

    let min_margin = trace.min_comparison_margin();
    let degraded = mesh.is_degraded();
    rep.gate(
        "comparison",
        degraded || min_margin >= -cfg.tolerances.comparison,
        if degraded {
            format!("min(u_eps - subsolution) = {min_margin:.3e}; obtuse mesh, reported only")
        } else {
            format!("min(u_eps - subsolution) = {min_margin:.3e}")
        },
    );
    let (sr, gr, inc) = (trace.sup_ratio(), trace.grad_ratio(), trace.difference_increases());
    rep.gate(
        "uniform_bounds",
        sr < SUP_RATIO_MAX && gr < GRAD_RATIO_MAX && inc <= 1,
        format!("sup ratio {sr:.4}, gradient ratio {gr:.4}, difference increases {inc}"),
    );

    let t = Instant::now();
    match gamma {
        Some(gamma) if sigma > 0.0 => {
            let dist = distance_field(&mesh);
            let constants = compute_growth_constants(&f, &g, &sub.field, &dist, lf, lg, sigma, p, gamma)?;
            let reactions = RegularizedReactions::new(truncate_f(&f, &sub.field)?, g.clone(), eps_final)?;
            let report = growth_bounds_check(&reactions, &dist, &constants, cfg.growth_samples, cfg.seed)?;
            let worst = report.max_violation();
            rep.gate(
                "growth_bounds",
                worst <= GROWTH_TOL,
                format!("largest violation {worst:.3e} over {} samples", report.samples),
            );
            rep.growth = Some(GrowthSection {
                epsilon: eps_final,
                constants,
                report,
            });
        }
        _ => {
            rep.gate("growth_bounds", false, "no singularity exponent or sigma available".into());
        }
    }
    rep.time("growth", t);

    let t = Instant::now();
    let strong = recover_reaction_fields(&trace, &f, &g, cfg.tolerances.bracket)?;
    rep.gate(
        "brackets",
        strong.bracket_violations <= BRACKET_FRACTION,
        format!(
            "violation fraction {:.4e} (limit envelopes: {:.4e})",
            strong.bracket_violations, strong.limit_bracket_violations
        ),
    );
    let tol_dist = cfg.tolerances.tol_dist.unwrap_or(eps_final);
    let stats = strong_residual_check(&strong, &f, &g, tol_dist, cfg.min_distance)?;
    rep.strong_solution = Some(strong.summary());
    rep.strong_residual = Some(ResidualSummary::from(&stats));
    rep.artifacts.residual_field = Some(stats.residual_field);
    rep.artifacts.trace = Some(trace);
    rep.time("recovery", t);
    Ok(rep)
}

/// One written file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn get(&self, path: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|e| e.path == path)
    }
}

struct Writer<'a> {
    root: &'a Path,
    entries: Vec<ManifestEntry>,
}

impl Writer<'_> {
    fn put(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.entries.push(ManifestEntry {
            path: rel.into(),
            sha256: hex::encode(Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Argument(e.to_string()))?;
        s.push('\n');
        self.put(rel, s.as_bytes())
    }

    fn finish(mut self) -> Result<Manifest> {
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest { files: self.entries };
        let mut s = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Argument(e.to_string()))?;
        s.push('\n');
        let path = self.root.join("manifest.json");
        fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

#[derive(Serialize)]
struct TraceRecordOut<'a> {
    #[serde(flatten)]
    summary: crate::scheme::RecordSummary,
    u: &'a [f64],
    f_eps: &'a [[f64; 7]],
    g_eps: &'a [f64],
}

#[derive(Serialize)]
struct TraceOut<'a> {
    p: f64,
    failure: &'a Option<String>,
    stagnated: bool,
    records: Vec<TraceRecordOut<'a>>,
}

fn residual_csv(mesh: &Mesh, field: &[Option<f64>]) -> String {
    let mut s = String::from("x,y,residual\n");
    for (p, r) in mesh.vertices().iter().zip(field) {
        if let Some(r) = r {
            s.push_str(&format!("{:?},{:?},{:?}\n", p[0], p[1], r));
        }
    }
    s
}

/// Writes the report, timings, mesh, fields and trace under `dir`, plus
/// `manifest.json` with a SHA-256 for every other file.
pub fn write_outputs(report: &RunReport, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = Writer {
        root: dir,
        entries: Vec::new(),
    };
    w.json("report.json", report)?;
    w.json("timings.json", &report.timings)?;
    let a = &report.artifacts;
    if let Some(mesh) = &a.mesh {
        w.put("mesh.txt", mesh_to_string(mesh).as_bytes())?;
    }
    if let Some(phi) = &a.eigenfunction {
        w.put("eigenfunction.csv", field_to_csv(phi, false).as_bytes())?;
    }
    if let Some(sub) = &a.subsolution {
        w.put("subsolution.csv", field_to_csv(sub, false).as_bytes())?;
    }
    if let Some(u) = &a.u {
        w.put("u.csv", field_to_csv(u, true).as_bytes())?;
    }
    if let Some(trace) = &a.trace {
        let out = TraceOut {
            p: trace.p,
            failure: &trace.failure,
            stagnated: trace.stagnated,
            records: trace
                .records
                .iter()
                .map(|r| TraceRecordOut {
                    summary: r.summary(),
                    u: r.u_eps.values(),
                    f_eps: &r.samples.f,
                    g_eps: &r.samples.g,
                })
                .collect(),
        };
        w.json("trace.json", &out)?;
    }
    if let (Some(mesh), Some(field)) = (&a.mesh, &a.residual_field) {
        w.put("residual.csv", residual_csv(mesh, field).as_bytes())?;
    }
    w.finish()
}

/// Null-projection runs for `Ψ(ξ) = |ξ|^{p−2}ξ` over a decade of `ε`.
#[derive(Debug, Clone, Serialize)]
pub struct NullProjectionStudy {
    pub p: f64,
    pub annulus: (f64, f64),
    pub lip: f64,
    pub boxes: usize,
    pub runs: Vec<NullProjectionReport>,
    /// Every run satisfied `Σ_j Σ_k |Ĩ_k^j| < N·Lip·ε` per output axis.
    pub all_below_bound: bool,
    /// Largest relative deviation of `achieved/ε` from its mean.
    pub scaling_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalityLevel {
    pub n: usize,
    pub h: f64,
    pub result: LocalityResult,
}

/// Plateau test: a field constant along axis 1 on `D`.
#[derive(Debug, Clone, Serialize)]
pub struct LocalityStudy {
    pub domain: (Vec<f64>, Vec<f64>),
    pub set: String,
    pub levels: Vec<LocalityLevel>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MeasureLabRecords {
    pub null_projection: NullProjectionStudy,
    pub counterexample: CounterexampleRecord,
    pub locality: LocalityStudy,
    #[serde(skip)]
    pub null_set: BoxSet,
}

/// Epsilons of the null-projection study.
pub const NULL_PROJECTION_EPS: [f64; 4] = [1e-3, 2e-3, 5e-3, 1e-2];
/// Grid cells per axis of the plateau study on `[−1, 1]²`.
pub const LOCALITY_GRIDS: [usize; 3] = [256, 512, 1024];

/// Plateau field: depends on `x₂` only for `|x₁| ≤ 0.3`.
pub fn plateau_field(x: &[f64]) -> f64 {
    let bump = (x[0].abs() - 0.3).max(0.0);
    (3.0 * x[1]).sin() + bump * bump * x[1].cos()
}

/// The demonstration records of the measure laboratory.
pub fn run_measure_lab(p: f64, seed: u64) -> Result<MeasureLabRecords> {
    let annulus = (0.5, 2.0);
    let psi = LipschitzMap::power_map(p, 2, annulus, 20_000, seed)?;
    let d = arc_boxes(16, 1e-6, 1.0);
    let runs = NULL_PROJECTION_EPS
        .iter()
        .map(|&eps| verify_null_projection(&psi, &d, eps))
        .collect::<Result<Vec<_>>>()?;
    let all_below_bound = runs.iter().all(|r| r.achieved.iter().all(|&a| a < r.bound));
    let slopes: Vec<f64> = runs.iter().map(|r| r.achieved.iter().sum::<f64>() / r.epsilon).collect();
    let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
    let scaling_deviation = slopes.iter().map(|s| (s / mean - 1.0).abs()).fold(0.0, f64::max);

    let plateau = BoxSet::new(2, vec![vec![(-0.25, 0.25), (-0.8, 0.8)]])?;
    let levels = LOCALITY_GRIDS
        .iter()
        .map(|&n| {
            let field = GridField::sample(vec![-1.0, -1.0], vec![1.0, 1.0], n, plateau_field)?;
            let h = 2.0 / n as f64;
            Ok(LocalityLevel {
                n,
                h,
                result: verify_locality(&field, &plateau, 1, 1e-6)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(MeasureLabRecords {
        null_projection: NullProjectionStudy {
            p,
            annulus,
            lip: psi.lip(),
            boxes: d.boxes().len(),
            runs,
            all_below_bound,
            scaling_deviation,
        },
        counterexample: jacobian_counterexample(2, 2)?,
        locality: LocalityStudy {
            domain: (vec![-1.0, -1.0], vec![1.0, 1.0]),
            set: plateau.to_text(),
            levels,
        },
        null_set: d,
    })
}

/// Writes the measure-lab records under `dir/measure/`.
pub fn write_measure_lab(records: &MeasureLabRecords, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut w = Writer {
        root: dir,
        entries: Vec::new(),
    };
    w.json("measure/null_projection.json", &records.null_projection)?;
    w.json("measure/counterexample.json", &records.counterexample)?;
    w.json("measure/locality.json", &records.locality)?;
    w.put("measure/null_set.txt", records.null_set.to_text().as_bytes())?;
    w.finish()
}
