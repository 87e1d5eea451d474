//! Sub-solution, regularized solves, the ε → 0 continuation and the checks
//! applied to its limit.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh_fem::{distance_field, DiscreteField};
use crate::plap_core::{apply_plap_residual, eigen_load, solve_plap_dirichlet_with_stats, EigenPair, PlapConfig};
use crate::problem_def::{
    ball_envelope, default_radii_at, envelopes_at, g_inf_near_zero, C0Branch, ConditionReport, NonlinearitySpec,
};
use crate::quadrature::dunavant7;
use crate::regularization::{truncate_f, ReactionSamples, RegularizedReactions};

/// Largest δ tried by the sub-solution scan.
pub const SCAN_MAX: f64 = 0.99;
/// Scan points: `δ_j = SCAN_MAX·2^{−j/4}`.
const SCAN_STEPS: usize = 96;
/// Samples of `(0, 2δ]` per octave, and octaves below `2δ`.
const SAMPLES_PER_OCTAVE: usize = 16;
const SAMPLE_OCTAVES: usize = 40;
/// Fraction of the largest admissible `k`.
pub const K_FACTOR: f64 = 0.9;

/// One δ of the scan.
#[derive(Debug, Clone, Serialize)]
pub struct ScanEntry {
    pub delta: f64,
    pub admissible: bool,
    /// Sampled `inf g` over `B_{2δ}(0)` on the g-branch, else 0.
    pub theta: f64,
}

/// `ū = kφ₁`.
#[derive(Debug, Clone)]
pub struct Subsolution {
    pub field: DiscreteField,
    pub k: f64,
    pub delta: f64,
    pub branch: C0Branch,
    pub theta: f64,
    pub lambda1: f64,
    pub p: f64,
    pub scan: Vec<ScanEntry>,
}

/// Serializable view of a [`Subsolution`].
#[derive(Debug, Clone, Serialize)]
pub struct SubsolutionSummary {
    pub k: f64,
    pub delta: f64,
    pub branch: C0Branch,
    pub theta: f64,
    pub sup_norm: f64,
    pub grad_sup_norm: f64,
    pub scan_length: usize,
}

impl Subsolution {
    pub fn summary(&self) -> SubsolutionSummary {
        SubsolutionSummary {
            k: self.k,
            delta: self.delta,
            branch: self.branch,
            theta: self.theta,
            sup_norm: self.field.sup_norm(),
            grad_sup_norm: self.field.grad_sup_norm(),
            scan_length: self.scan.len(),
        }
    }
}

/// Points of `(0, t]` on a geometric grid, plus both sides of the declared
/// discontinuities inside.
fn samples_below(f: &NonlinearitySpec, t: f64) -> Vec<f64> {
    let mut s: Vec<f64> = (0..=SAMPLES_PER_OCTAVE * SAMPLE_OCTAVES)
        .map(|k| t * (-(k as f64) / SAMPLES_PER_OCTAVE as f64).exp2())
        .collect();
    for &d in f.declared_points() {
        for x in [d * (1.0 - 1e-9), d, d * (1.0 + 1e-9)] {
            if x > 0.0 && x <= t {
                s.push(x);
            }
        }
    }
    s
}

fn f_branch_holds(f: &NonlinearitySpec, lambda1: f64, p: f64, delta: f64) -> bool {
    samples_below(f, 2.0 * delta)
        .iter()
        .all(|&s| f.eval_scalar(s) >= lambda1 * s.powf(p - 1.0))
}

/// Builds `ū = kφ₁` on the branch selected by `report`.
pub fn build_subsolution(
    report: &ConditionReport,
    eig: &EigenPair,
    fspec: &NonlinearitySpec,
    gspec: &NonlinearitySpec,
) -> Result<Subsolution> {
    let branch = report.c0_branch;
    if !matches!(branch, C0Branch::FBranch | C0Branch::GBranch) {
        return Err(Error::Precondition(format!(
            "no sub-solution: small-solution condition is {branch:?}"
        )));
    }
    let (lambda1, p) = (eig.lambda1, report.p);
    let phi = &eig.phi1;
    let (phi_sup, phi_grad) = (phi.sup_norm(), phi.grad_sup_norm());
    if !(phi_sup > 0.0 && phi_grad > 0.0) {
        return Err(Error::Precondition("eigenfunction vanishes".into()));
    }

    let mut scan = Vec::new();
    let mut found = None;
    for j in 0..=SCAN_STEPS {
        let delta = SCAN_MAX * (-(j as f64) / 4.0).exp2();
        let (admissible, theta) = match branch {
            C0Branch::FBranch => (f_branch_holds(fspec, lambda1, p, delta), 0.0),
            _ => {
                let theta = g_inf_near_zero(gspec, 2.0 * delta)?;
                (theta > 0.0 && theta.is_finite(), theta)
            }
        };
        scan.push(ScanEntry { delta, admissible, theta });
        if admissible {
            found = Some((delta, theta));
            break;
        }
    }
    let Some((delta, theta)) = found else {
        return Err(Error::Construction {
            message: format!("no admissible delta on the {branch:?} scan"),
            trace: scan
                .iter()
                .map(|e| format!("delta={:.6e} admissible={} theta={:.6e}", e.delta, e.admissible, e.theta))
                .collect(),
        });
    };
    let k_max = match branch {
        C0Branch::FBranch => delta / phi_sup,
        _ => ((theta / lambda1).powf(1.0 / (p - 1.0)) / phi_sup).min(delta / phi_grad),
    };
    let k = K_FACTOR * k_max;
    Ok(Subsolution {
        field: phi.scaled(k),
        k,
        delta,
        branch,
        theta,
        lambda1,
        p,
        scan,
    })
}

/// Dual norm of `A_p^τ(ū) − λ₁|ū|^{p−2}ū`, with `τ = tau_rel·‖∇ū‖_∞`.
pub fn identity_residual(sub: &Subsolution, tau_rel: f64) -> Result<f64> {
    let u = &sub.field;
    let load: Vec<f64> = eigen_load(u, sub.p).iter().map(|b| sub.lambda1 * b).collect();
    let r = apply_plap_residual(u, &load, sub.p, tau_rel * u.grad_sup_norm())?;
    Ok(u.space().dual_norm(&r))
}

/// Worst nodal margin `∫[f(ū)+g(∇ū)]ψ_i − ⟨A_p^τ(ū), ψ_i⟩`.
pub fn verify_subsolution(
    sub: &Subsolution,
    fspec: &NonlinearitySpec,
    gspec: &NonlinearitySpec,
    tau_rel: f64,
) -> Result<f64> {
    let u = &sub.field;
    let rule = dunavant7();
    let space = u.space();
    let grads = u.gradients();
    let rhs = space.load(|e, q, _| {
        let s = u.eval_bary(e, &rule.points[q]);
        fspec.eval_scalar(s) + gspec.eval_vector(&grads[e])
    });
    let r = apply_plap_residual(u, &rhs, sub.p, tau_rel * u.grad_sup_norm())?;
    Ok(r.iter().map(|x| -x).fold(f64::INFINITY, f64::min))
}

/// Settings of the outer fixed-point iteration.
#[derive(Debug, Clone, Serialize)]
pub struct SchemeConfig {
    pub plap: PlapConfig,
    /// Stopping threshold for the relative sup change and the relative
    /// combined residual.
    pub tol: f64,
    pub max_outer: usize,
}

impl SchemeConfig {
    pub fn new(p: f64) -> Self {
        SchemeConfig {
            plap: PlapConfig {
                newton: true,
                ..PlapConfig::new(p)
            },
            tol: 1e-8,
            max_outer: 200,
        }
    }
}

const OMEGA_START: f64 = 0.5;
const OMEGA_MIN: f64 = 0.05;
const OMEGA_MAX: f64 = 1.5;

/// A converged regularized solution.
#[derive(Debug, Clone)]
pub struct RegularizedSolve {
    pub u: DiscreteField,
    pub samples: ReactionSamples,
    pub iterations: usize,
    /// Combined residual relative to the load.
    pub residual: f64,
    /// Sup change per outer iteration.
    pub history: Vec<f64>,
}

fn reaction_load(u: &DiscreteField, s: &ReactionSamples) -> Vec<f64> {
    u.space().load(|e, q, _| s.f[e][q] + s.g[e])
}

fn relative_residual(u: &DiscreteField, load: &[f64], cfg: &PlapConfig) -> Result<f64> {
    let tau = cfg.tau * u.grad_sup_norm();
    let r = apply_plap_residual(u, load, cfg.p, tau)?;
    let space = u.space();
    let b = space.dual_norm(load);
    let rn = space.dual_norm(&r);
    Ok(if b > 0.0 { rn / b } else { rn })
}

/// Solves `−Δ_p u = F_ε(u) + G_ε(u)` by relaxed fixed-point iteration from
/// `init`.
pub fn solve_regularized(
    reactions: &RegularizedReactions,
    coercivity_margin: f64,
    cfg: &SchemeConfig,
    init: &DiscreteField,
) -> Result<RegularizedSolve> {
    if !(coercivity_margin > 0.0) {
        return Err(Error::Precondition(format!(
            "coercivity margin {coercivity_margin:.6} is not positive"
        )));
    }
    let mut u = init.clone();
    let mut samples = reactions.sample(&u)?;
    let mut history = Vec::new();
    let mut omega = OMEGA_START;
    let mut prev_step: Option<Vec<f64>> = None;
    let mut last_residual = f64::INFINITY;
    for it in 1..=cfg.max_outer {
        let load = reaction_load(&u, &samples);
        let (next, _) = solve_plap_dirichlet_with_stats(&load, &cfg.plap, &u)?;
        let step: Vec<f64> = next.values().iter().zip(u.values()).map(|(a, b)| a - b).collect();
        // Aitken update of the relaxation factor
        if let Some(prev) = &prev_step {
            let (mut num, mut den) = (0.0, 0.0);
            for (a, b) in step.iter().zip(prev) {
                num += b * (a - b);
                den += (a - b) * (a - b);
            }
            if den > 0.0 {
                omega = (-omega * num / den).clamp(OMEGA_MIN, OMEGA_MAX);
            }
        }
        let vals: Vec<f64> = u.values().iter().zip(&step).map(|(a, d)| a + omega * d).collect();
        let change = omega * step.iter().fold(0.0f64, |m, d| m.max(d.abs()));
        prev_step = Some(step);
        u = DiscreteField::new(std::sync::Arc::clone(u.space()), vals)?;
        samples = reactions.sample(&u)?;
        let residual = relative_residual(&u, &reaction_load(&u, &samples), &cfg.plap)?;
        history.push(change);
        last_residual = residual;
        if change <= cfg.tol * u.sup_norm().max(1.0) && residual <= cfg.tol {
            return Ok(RegularizedSolve {
                u,
                samples,
                iterations: it,
                residual,
                history,
            });
        }
    }
    Err(Error::Convergence {
        context: format!(
            "regularized fixed point at eps = {:.3e}; sup changes {:?}",
            reactions.epsilon(),
            &history[history.len().saturating_sub(5)..]
        ),
        iterations: cfg.max_outer,
        last_residual,
    })
}

/// `min (u_ε − ū)` over the vertices.
pub fn comparison_check(u_eps: &DiscreteField, sub: &Subsolution) -> Result<f64> {
    if !u_eps.same_space(&sub.field) {
        return Err(Error::Type("comparison needs both fields on the same mesh".into()));
    }
    Ok(u_eps
        .values()
        .iter()
        .zip(sub.field.values())
        .map(|(a, b)| a - b)
        .fold(f64::INFINITY, f64::min))
}

/// One ε of the continuation.
#[derive(Debug, Clone)]
pub struct ContinuationRecord {
    pub epsilon: f64,
    pub u_eps: DiscreteField,
    pub comparison_margin: f64,
    pub sup_norm: f64,
    pub grad_sup_norm: f64,
    pub residual_norm: f64,
    pub iterations: usize,
    pub samples: ReactionSamples,
    /// `‖u_ε − u_{ε_prev}‖_∞`.
    pub difference: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordSummary {
    pub epsilon: f64,
    pub comparison_margin: f64,
    pub sup_norm: f64,
    pub grad_sup_norm: f64,
    pub residual_norm: f64,
    pub iterations: usize,
    pub crossing_elements: usize,
    pub difference: Option<f64>,
}

impl ContinuationRecord {
    pub fn summary(&self) -> RecordSummary {
        RecordSummary {
            epsilon: self.epsilon,
            comparison_margin: self.comparison_margin,
            sup_norm: self.sup_norm,
            grad_sup_norm: self.grad_sup_norm,
            residual_norm: self.residual_norm,
            iterations: self.iterations,
            crossing_elements: self.samples.crossing.iter().filter(|&&c| c).count(),
            difference: self.difference,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ContinuationTrace {
    pub p: f64,
    /// The sub-solution used for the truncation.
    pub floor: Option<DiscreteField>,
    pub records: Vec<ContinuationRecord>,
    /// Error of the solve that stopped the continuation.
    pub failure: Option<String>,
    /// Stopped because the last difference fell below the tolerance.
    pub stagnated: bool,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceSummary {
    pub records: Vec<RecordSummary>,
    pub failure: Option<String>,
    pub stagnated: bool,
    pub sup_ratio: f64,
    pub grad_ratio: f64,
    pub difference_increases: usize,
    pub min_comparison_margin: f64,
    pub notes: Vec<String>,
}

fn max_over_min(v: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if hi == 0.0 {
        1.0
    } else {
        hi / lo
    }
}

impl ContinuationTrace {
    /// `max/min` of `‖u_ε‖_∞` over the records.
    pub fn sup_ratio(&self) -> f64 {
        max_over_min(self.records.iter().map(|r| r.sup_norm))
    }

    pub fn grad_ratio(&self) -> f64 {
        max_over_min(self.records.iter().map(|r| r.grad_sup_norm))
    }

    pub fn differences(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.difference).collect()
    }

    /// Number of times a successive difference grew.
    pub fn difference_increases(&self) -> usize {
        self.differences().windows(2).filter(|w| w[1] > w[0]).count()
    }

    pub fn min_comparison_margin(&self) -> f64 {
        self.records.iter().map(|r| r.comparison_margin).fold(f64::INFINITY, f64::min)
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            records: self.records.iter().map(|r| r.summary()).collect(),
            failure: self.failure.clone(),
            stagnated: self.stagnated,
            sup_ratio: self.sup_ratio(),
            grad_ratio: self.grad_ratio(),
            difference_increases: self.difference_increases(),
            min_comparison_margin: self.min_comparison_margin(),
            notes: self.notes.clone(),
        }
    }
}

/// `ε_k = δ/2^{k+1}`, `k = 0..steps`.
pub fn default_schedule(delta: f64, steps: usize) -> Vec<f64> {
    (0..steps).map(|k| delta * (-(k as f64 + 1.0)).exp2()).collect()
}

/// Solves along a decreasing schedule, warm-starting each ε from the last.
pub fn run_continuation(
    schedule: &[f64],
    sub: &Subsolution,
    fspec: &NonlinearitySpec,
    gspec: &NonlinearitySpec,
    coercivity_margin: f64,
    cfg: &SchemeConfig,
) -> Result<ContinuationTrace> {
    if schedule.is_empty() {
        return Err(Error::Argument("empty epsilon schedule".into()));
    }
    if schedule.windows(2).any(|w| !(w[1] < w[0])) || !(schedule[schedule.len() - 1] > 0.0) {
        return Err(Error::Argument("epsilon schedule must be positive and strictly decreasing".into()));
    }
    if !(schedule[0] < sub.delta) {
        return Err(Error::Argument(format!(
            "schedule starts at {} but must stay below delta = {}",
            schedule[0], sub.delta
        )));
    }
    let tf = truncate_f(fspec, &sub.field)?;
    let mut trace = ContinuationTrace {
        p: sub.p,
        floor: Some(sub.field.clone()),
        ..ContinuationTrace::default()
    };
    if sub.field.space().mesh().is_degraded() {
        trace
            .notes
            .push("mesh has obtuse angles: comparison margins are reported, not asserted".into());
    }
    for &eps in schedule {
        let reactions = RegularizedReactions::new(tf.clone(), gspec.clone(), eps)?;
        let init = trace.records.last().map_or(&sub.field, |r| &r.u_eps);
        let solved = match solve_regularized(&reactions, coercivity_margin, cfg, init) {
            Ok(s) => s,
            Err(e) => {
                trace.failure = Some(format!("eps = {eps:.6e}: {e}"));
                break;
            }
        };
        let difference = match trace.records.last() {
            Some(prev) => Some(solved.u.minus(&prev.u_eps)?.sup_norm()),
            None => None,
        };
        let u = solved.u;
        trace.records.push(ContinuationRecord {
            epsilon: eps,
            comparison_margin: comparison_check(&u, sub)?,
            sup_norm: u.sup_norm(),
            grad_sup_norm: u.grad_sup_norm(),
            residual_norm: solved.residual,
            iterations: solved.iterations,
            samples: solved.samples,
            difference,
            u_eps: u,
        });
        if difference.is_some_and(|d| d <= cfg.tol * trace.records.last().unwrap().sup_norm.max(1.0)) {
            trace.stagnated = true;
            break;
        }
    }
    Ok(trace)
}

/// Reaction fields of the last ε and their bracket checks.
#[derive(Debug, Clone)]
pub struct StrongSolutionReport {
    pub u: DiscreteField,
    pub floor: Option<DiscreteField>,
    pub p: f64,
    pub epsilon: f64,
    /// `F_ε(u)` at the quadrature points.
    pub v_field: Vec<[f64; 7]>,
    /// `G_ε(u)` per element (constant on each element).
    pub w_field: Vec<f64>,
    /// Fraction of quadrature points where `v` or `w` leaves the bracket over
    /// the ball of radius `ε`.
    pub bracket_violations: f64,
    pub f_violations: f64,
    pub g_violations: f64,
    /// Same fraction against the limit envelopes `f̲(u), f̄(u)`, `g̲(∇u), ḡ(∇u)`.
    pub limit_bracket_violations: f64,
    /// Area fraction where `u` or `∇u` is within `ε` of the declared sets.
    pub discontinuity_zone_fraction: f64,
    pub tol: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StrongSolutionSummary {
    pub epsilon: f64,
    pub bracket_violations: f64,
    pub f_violations: f64,
    pub g_violations: f64,
    pub limit_bracket_violations: f64,
    pub discontinuity_zone_fraction: f64,
    pub tol: f64,
    pub sup_norm: f64,
}

impl StrongSolutionReport {
    pub fn summary(&self) -> StrongSolutionSummary {
        StrongSolutionSummary {
            epsilon: self.epsilon,
            bracket_violations: self.bracket_violations,
            f_violations: self.f_violations,
            g_violations: self.g_violations,
            limit_bracket_violations: self.limit_bracket_violations,
            discontinuity_zone_fraction: self.discontinuity_zone_fraction,
            tol: self.tol,
            sup_norm: self.u.sup_norm(),
        }
    }
}

fn outside(v: f64, lo: f64, hi: f64, tol: f64) -> bool {
    let t = tol * v.abs().max(1.0);
    v < lo - t || v > hi + t
}

/// Distance from `x` to a finite point set.
fn point_distance(x: f64, points: &[f64]) -> f64 {
    points.iter().map(|d| (x - d).abs()).fold(f64::INFINITY, f64::min)
}

/// Smallest per-axis distance from `xi` to the declared axis sets.
fn axis_distance(xi: &[f64], axes: &[Vec<(f64, f64)>]) -> f64 {
    xi.iter()
        .zip(axes)
        .flat_map(|(&x, ivs)| ivs.iter().map(move |&(a, b)| (a - x).max(x - b).max(0.0)))
        .fold(f64::INFINITY, f64::min)
}

/// Takes `v, w` from the last record and checks them against the envelopes
/// of `f` at `max(u, ū)` and of `g` at `∇u`.
pub fn recover_reaction_fields(
    trace: &ContinuationTrace,
    fspec: &NonlinearitySpec,
    gspec: &NonlinearitySpec,
    tol: f64,
) -> Result<StrongSolutionReport> {
    if trace.records.len() < 2 {
        return Err(Error::Precondition(format!(
            "recovery needs at least two continuation records, found {}",
            trace.records.len()
        )));
    }
    let last = trace.records.last().unwrap();
    let u = last.u_eps.clone();
    let eps = last.epsilon;
    let ne = u.space().mesh().n_triangles();
    // brackets are taken at the truncated argument max(u, ū)
    let mut uq = u.quadrature_values();
    if let Some(floor) = &trace.floor {
        for (a, b) in uq.iter_mut().zip(floor.quadrature_values()) {
            for q in 0..7 {
                a[q] = a[q].max(b[q]);
            }
        }
    }
    let grads = u.gradients();
    let rule = dunavant7();

    let per_element: Vec<Result<([bool; 7], [bool; 7], [bool; 7], [bool; 7])>> = (0..ne)
        .into_par_iter()
        .map(|e| {
            let w = last.samples.g[e];
            let (glo, ghi) = ball_envelope(gspec, &grads[e], eps)?;
            let g_bad = outside(w, glo, ghi, tol);
            let g_lim = envelopes_at(gspec, &grads[e], &default_radii_at(gspec, &grads[e]))?;
            let g_lim_bad = outside(w, g_lim.lower, g_lim.upper, tol);
            let mut f_bad = [false; 7];
            let mut f_lim_bad = [false; 7];
            for q in 0..7 {
                let (s, v) = ([uq[e][q]], last.samples.f[e][q]);
                let (lo, hi) = ball_envelope(fspec, &s, eps)?;
                f_bad[q] = outside(v, lo, hi, tol);
                let lim = envelopes_at(fspec, &s, &default_radii_at(fspec, &s))?;
                f_lim_bad[q] = outside(v, lim.lower, lim.upper, tol);
            }
            Ok((f_bad, [g_bad; 7], f_lim_bad, [g_lim_bad; 7]))
        })
        .collect();

    let (mut nf, mut ng, mut nb, mut nl) = (0usize, 0usize, 0usize, 0usize);
    let (mut zone, mut area) = (0.0, 0.0);
    let declared = fspec.declared_points();
    let axes = gspec.declared_axes();
    for (e, r) in per_element.into_iter().enumerate() {
        let (fb, gb, fl, gl) = r?;
        let g_zone = axis_distance(&grads[e], axes) < eps;
        for q in 0..7 {
            nf += fb[q] as usize;
            ng += gb[q] as usize;
            nb += (fb[q] || gb[q]) as usize;
            nl += (fl[q] || gl[q]) as usize;
            let wq = rule.weights[q] * u.space().area(e);
            area += wq;
            if g_zone || point_distance(uq[e][q], declared) < eps {
                zone += wq;
            }
        }
    }
    let n = (7 * ne) as f64;
    Ok(StrongSolutionReport {
        p: trace.p,
        epsilon: eps,
        v_field: last.samples.f.clone(),
        w_field: last.samples.g.clone(),
        bracket_violations: nb as f64 / n,
        f_violations: nf as f64 / n,
        g_violations: ng as f64 / n,
        limit_bracket_violations: nl as f64 / n,
        discontinuity_zone_fraction: zone / area,
        tol,
        u,
        floor: trace.floor.clone(),
    })
}

/// Statistics of the reconstructed strong residual.
#[derive(Debug, Clone, Serialize)]
pub struct StrongResidualStats {
    /// `|−Δ_p u − f(u) − g(∇u)|` per vertex; `None` where excluded or not
    /// considered.
    pub residual_field: Vec<Option<f64>>,
    pub percentile90: f64,
    pub median: f64,
    pub max: f64,
    pub evaluated: usize,
    /// Lumped-mass fractions of the considered vertices inside the zones.
    pub excluded_f_fraction: f64,
    pub excluded_g_fraction: f64,
    /// Excluded vertices where the upper envelope vanishes, and how many of
    /// them have a nonzero reaction value.
    pub forced_zero_checked: usize,
    pub forced_zero_failed: usize,
    pub tol_dist: f64,
    pub min_distance: f64,
}

/// Lumped strong form `−div(|∇u|^{p−2}∇u)` at vertex `i`:
/// `⟨A_p(u), ψ_i⟩ / ∫ψ_i`.
pub fn lumped_divergence(u: &DiscreteField, p: f64) -> Result<Vec<f64>> {
    let space = u.space();
    let a = apply_plap_residual(u, &vec![0.0; space.n_dofs()], p, 0.0)?;
    let m = space.lumped_mass();
    Ok(a.iter().zip(m).map(|(x, w)| x / w).collect())
}

/// Compares the lumped strong form against `f(max(u, ū)) + g(∇u)` at interior
/// vertices with boundary distance at least `min_distance`, skipping those
/// within `tol_dist` of the declared sets.
pub fn strong_residual_check(
    report: &StrongSolutionReport,
    fspec: &NonlinearitySpec,
    gspec: &NonlinearitySpec,
    tol_dist: f64,
    min_distance: f64,
) -> Result<StrongResidualStats> {
    let u = &report.u;
    let space = u.space();
    let mesh = space.mesh();
    let dist = distance_field(mesh);
    let div = lumped_divergence(u, report.p)?;
    let vgrad = u.vertex_gradients();
    let mass = space.lumped_mass();
    let declared = fspec.declared_points();
    let axes = gspec.declared_axes();

    let mut field = vec![None; mesh.n_vertices()];
    let mut values = Vec::new();
    let (mut m_all, mut m_f, mut m_g) = (0.0, 0.0, 0.0);
    let (mut checked, mut failed) = (0, 0);
    for (d, &v) in space.interior().iter().enumerate() {
        if dist.nodal()[v] < min_distance {
            continue;
        }
        let floor = report.floor.as_ref().map_or(f64::NEG_INFINITY, |f| f.values()[v]);
        let (s, xi) = (u.values()[v].max(floor), vgrad[v]);
        m_all += mass[d];
        let in_f = point_distance(s, declared) < tol_dist;
        let in_g = axis_distance(&xi, axes) < tol_dist;
        if in_f || in_g {
            m_f += if in_f { mass[d] } else { 0.0 };
            m_g += if in_g { mass[d] } else { 0.0 };
            if in_f && ball_envelope(fspec, &[s], tol_dist)?.1 == 0.0 {
                checked += 1;
                failed += (fspec.eval_scalar(s) != 0.0) as usize;
            }
            if in_g && ball_envelope(gspec, &xi, tol_dist)?.1 == 0.0 {
                checked += 1;
                failed += (gspec.eval_vector(&xi) != 0.0) as usize;
            }
            continue;
        }
        let r = (div[d] - fspec.eval_scalar(s) - gspec.eval_vector(&xi)).abs();
        field[v] = Some(r);
        values.push(r);
    }
    values.sort_by(f64::total_cmp);
    let rank = |q: f64| -> f64 {
        if values.is_empty() {
            return f64::NAN;
        }
        let k = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
        values[k - 1]
    };
    let frac = |m: f64| if m_all > 0.0 { m / m_all } else { 0.0 };
    Ok(StrongResidualStats {
        percentile90: rank(0.9),
        median: rank(0.5),
        max: values.last().copied().unwrap_or(f64::NAN),
        evaluated: values.len(),
        excluded_f_fraction: frac(m_f),
        excluded_g_fraction: frac(m_g),
        forced_zero_checked: checked,
        forced_zero_failed: failed,
        residual_field: field,
        tol_dist,
        min_distance,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::expr::Expr;
    use crate::mesh_fem::{build_mesh, unit_square, FemSpace};
    use crate::plap_core::first_eigenpair;
    use crate::problem_def::{check_conditions, Piece1d};

    fn space(h: f64) -> Arc<FemSpace> {
        FemSpace::new(Arc::new(build_mesh(&unit_square(), h).unwrap())).unwrap()
    }

    fn eig(h: f64, p: f64) -> EigenPair {
        first_eigenpair(&PlapConfig::new(p), &space(h)).unwrap()
    }

    fn bound(src: &str, e: &EigenPair, p: f64) -> NonlinearitySpec {
        let mut f = NonlinearitySpec::scalar_expr(src, None).unwrap();
        f.bind("lambda1", e.lambda1);
        f.bind("p", p);
        f
    }

    fn report(f: &NonlinearitySpec, g: &NonlinearitySpec, e: &EigenPair, p: f64) -> ConditionReport {
        check_conditions(f, g, e.lambda1, p, 0.0).unwrap()
    }

    fn manual(e: &EigenPair, p: f64, k: f64) -> Subsolution {
        Subsolution {
            field: e.phi1.scaled(k),
            k,
            delta: 0.5,
            branch: C0Branch::FBranch,
            theta: 0.0,
            lambda1: e.lambda1,
            p,
            scan: vec![],
        }
    }

    #[test]
    fn f_branch_any_delta() {
        let p = 1.5;
        let e = eig(0.125, p);
        let f = bound("2 * lambda1 * s^(p-1)", &e, p);
        let g = NonlinearitySpec::vector_expr(2, "0").unwrap();
        let sub = build_subsolution(&report(&f, &g, &e, p), &e, &f, &g).unwrap();
        assert_eq!(sub.branch, C0Branch::FBranch);
        assert_eq!(sub.delta, SCAN_MAX);
        assert!((sub.k - 0.9 * SCAN_MAX / e.phi1.sup_norm()).abs() < 1e-12);
        assert!(sub.field.sup_norm() < sub.delta);
        assert!(verify_subsolution(&sub, &f, &g, 1e-8).unwrap() >= -1e-9);
    }

    #[test]
    fn g_branch_constant() {
        let p = 1.5;
        let e = eig(0.125, p);
        let f = NonlinearitySpec::scalar_expr("0", None).unwrap();
        let g = NonlinearitySpec::vector_expr(2, "0.3").unwrap();
        let rep = report(&f, &g, &e, p);
        assert_eq!(rep.c0_branch, C0Branch::GBranch);
        let sub = build_subsolution(&rep, &e, &f, &g).unwrap();
        assert_eq!(sub.delta, SCAN_MAX);
        assert_eq!(sub.theta, 0.3);
        let k1 = (0.3 / e.lambda1).powf(1.0 / (p - 1.0)) / e.phi1.sup_norm();
        let k2 = SCAN_MAX / e.phi1.grad_sup_norm();
        assert!((sub.k - 0.9 * k1.min(k2)).abs() < 1e-12);
        assert!(sub
            .field
            .values()
            .iter()
            .all(|&u| e.lambda1 * u.powf(p - 1.0) <= 0.3));
        assert!(sub.field.grad_sup_norm() < sub.delta);
        assert!(verify_subsolution(&sub, &f, &g, 1e-8).unwrap() >= -1e-9);
    }

    #[test]
    fn identity_residual_is_homogeneous() {
        let p = 1.5;
        let e = eig(0.125, p);
        let r1 = identity_residual(&manual(&e, p, 1.0), 1e-8).unwrap();
        let scale = e.phi1.space().dual_norm(&eigen_load(&e.phi1, p)) * e.lambda1;
        assert!(r1 <= 1.001 * e.residual * scale, "{r1} vs {scale}");
        assert!(e.residual <= crate::plap_core::EIGEN_RESIDUAL_TOL);
        for k in [0.01, 0.3, 7.0] {
            let rk = identity_residual(&manual(&e, p, k), 1e-8).unwrap();
            let expect = r1 * k.powf(p - 1.0);
            assert!((rk - expect).abs() <= 1e-6 * expect + 1e-14, "{k}: {rk} vs {expect}");
        }
    }

    #[test]
    fn zero_reactions_are_not_subsolved() {
        let p = 1.5;
        let e = eig(0.125, p);
        let f = NonlinearitySpec::scalar_expr("0", None).unwrap();
        let g = NonlinearitySpec::vector_expr(2, "0").unwrap();
        assert!(verify_subsolution(&manual(&e, p, 0.1), &f, &g, 1e-8).unwrap() < 0.0);
        assert!(matches!(
            build_subsolution(&report(&f, &g, &e, p), &e, &f, &g),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn no_admissible_delta_is_a_construction_error() {
        let p = 1.5;
        let e = eig(0.125, p);
        // the F-branch is forced although f stays below λ₁ s^{p−1} near 0.9
        let f = bound("2 * lambda1 * s^(p-1) * (1 + 10 * (s - 0.9)^2) / (1 + 10 * (s - 0.9)^2 + 5 * s^30)", &e, p);
        let g = NonlinearitySpec::vector_expr(2, "0").unwrap();
        let mut rep = report(&f, &g, &e, p);
        rep.c0_branch = C0Branch::FBranch;
        let sub = build_subsolution(&rep, &e, &f, &g).unwrap();
        assert!(sub.delta < SCAN_MAX && sub.scan.len() > 1);

        let zero = NonlinearitySpec::scalar_expr("0", None).unwrap();
        rep.c0_branch = C0Branch::FBranch;
        match build_subsolution(&rep, &e, &zero, &g) {
            Err(Error::Construction { trace, .. }) => assert_eq!(trace.len(), SCAN_STEPS + 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_reactions_give_zero_solution() {
        let p = 1.5;
        let e = eig(0.125, p);
        let sub = manual(&e, p, 0.05);
        let f = NonlinearitySpec::scalar_expr("0", None).unwrap();
        let g = NonlinearitySpec::vector_expr(2, "0").unwrap();
        let cfg = SchemeConfig::new(p);
        let tf = truncate_f(&f, &sub.field).unwrap();
        let re = RegularizedReactions::new(tf, g.clone(), 0.01).unwrap();
        let s = solve_regularized(&re, 1.0, &cfg, &sub.field).unwrap();
        assert_eq!(s.u.sup_norm(), 0.0);
        assert!(matches!(
            solve_regularized(&re, 0.0, &cfg, &sub.field),
            Err(Error::Precondition(_))
        ));

        let tr = run_continuation(&[0.4, 0.2, 0.1], &sub, &f, &g, 1.0, &cfg).unwrap();
        assert!(tr.records.iter().all(|r| r.sup_norm == 0.0));
        assert!(tr.differences().iter().all(|&d| d == 0.0));
        assert!(tr.stagnated);
        let rep = recover_reaction_fields(&tr, &f, &g, 1e-6).unwrap();
        assert!(rep.v_field.iter().flatten().all(|&v| v == 0.0));
        assert!(rep.w_field.iter().all(|&w| w == 0.0));
        assert_eq!(rep.bracket_violations, 0.0);
        let st = strong_residual_check(&rep, &f, &g, rep.epsilon, 0.0).unwrap();
        assert!(st.max <= 1e-12, "{}", st.max);
    }

    #[test]
    fn frozen_load_is_one_linear_solve() {
        let p = 2.0;
        let e = eig(0.125, p);
        let sub = manual(&e, p, 0.05);
        let f = NonlinearitySpec::scalar_expr("3", None).unwrap();
        let g = NonlinearitySpec::vector_expr(2, "0.5").unwrap();
        let tf = truncate_f(&f, &sub.field).unwrap();
        let re = RegularizedReactions::new(tf, g, 0.01).unwrap();
        let s = solve_regularized(&re, 0.5, &SchemeConfig::new(p), &sub.field).unwrap();
        let space = sub.field.space();
        let load = space.load(|_, _, _| 3.5);
        let lin = DiscreteField::from_interior(space, &space.laplace_solve(&load));
        assert!(s.u.minus(&lin).unwrap().sup_norm() < 1e-8 * lin.sup_norm());
    }

    #[test]
    fn singular_reaction_solve_stays_above_floor() {
        let p = 1.5;
        let e = eig(0.125, p);
        let half = e.lambda1 / 2.0;
        let f = NonlinearitySpec::scalar(
            vec![
                Piece1d {
                    lo: 0.0,
                    hi: 1.0,
                    expr: Expr::parse(&format!("{half} * s^0.5 + s^(-0.5)")).unwrap(),
                },
                Piece1d {
                    lo: 1.0,
                    hi: f64::INFINITY,
                    expr: Expr::parse(&format!("{half} + s^(-0.5)")).unwrap(),
                },
            ],
            vec![],
            Some(0.5),
        )
        .unwrap();
        let g = NonlinearitySpec::vector_expr(2, "0.2").unwrap();
        let rep = report(&f, &g, &e, p);
        assert!(rep.coercivity_margin > 0.0);
        let sub = build_subsolution(&rep, &e, &f, &g).unwrap();
        let cfg = SchemeConfig::new(p);
        let tf = truncate_f(&f, &sub.field).unwrap();
        let re = RegularizedReactions::new(tf, g, 0.5 * sub.delta).unwrap();
        let s = solve_regularized(&re, rep.coercivity_margin, &cfg, &sub.field).unwrap();
        assert!(s.residual <= cfg.tol);
        assert!(comparison_check(&s.u, &sub).unwrap() >= -1e-8);

        // a cold start from the zero field reaches the same residual level
        let cold = solve_regularized(&re, rep.coercivity_margin, &cfg, &DiscreteField::zeros(sub.field.space()));
        let cold = cold.unwrap();
        assert!(cold.residual <= cfg.tol);
        assert!(cold.u.minus(&s.u).unwrap().sup_norm() < 1e-6);
    }

    #[test]
    fn comparison_examples() {
        let p = 1.5;
        let e = eig(0.25, p);
        let sub = manual(&e, p, 0.2);
        assert_eq!(comparison_check(&sub.field, &sub).unwrap(), 0.0);
        let lower = DiscreteField::new(
            Arc::clone(sub.field.space()),
            sub.field.values().iter().map(|v| v - 0.1).collect(),
        )
        .unwrap();
        assert!((comparison_check(&lower, &sub).unwrap() + 0.1).abs() < 1e-15);
        let other = DiscreteField::zeros(&space(0.125));
        assert!(matches!(comparison_check(&other, &sub), Err(Error::Type(_))));
    }

    #[test]
    fn schedule_is_validated() {
        let p = 1.5;
        let e = eig(0.25, p);
        let sub = manual(&e, p, 0.1);
        let f = NonlinearitySpec::scalar_expr("1", None).unwrap();
        let g = NonlinearitySpec::vector_expr(2, "0").unwrap();
        let cfg = SchemeConfig::new(p);
        for bad in [vec![], vec![0.1, 0.2], vec![0.6, 0.1], vec![0.1, 0.0]] {
            assert!(matches!(
                run_continuation(&bad, &sub, &f, &g, 1.0, &cfg),
                Err(Error::Argument(_))
            ));
        }
        assert_eq!(default_schedule(0.4, 3), vec![0.2, 0.1, 0.05]);
    }

    #[test]
    fn recovery_needs_two_records() {
        let tr = ContinuationTrace::default();
        let f = NonlinearitySpec::scalar_expr("1", None).unwrap();
        let g = NonlinearitySpec::vector_expr(2, "0").unwrap();
        assert!(matches!(
            recover_reaction_fields(&tr, &f, &g, 1e-6),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn distances_to_declared_sets() {
        assert_eq!(point_distance(0.3, &[0.1, 0.35]), 0.04999999999999999);
        assert_eq!(point_distance(0.3, &[]), f64::INFINITY);
        let axes = vec![vec![(0.0, 0.0)], vec![(1.0, 2.0)]];
        assert_eq!(axis_distance(&[0.5, 1.5], &axes), 0.0);
        assert_eq!(axis_distance(&[0.25, 3.0], &axes), 0.25);
    }
}
