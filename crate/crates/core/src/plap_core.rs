//! Discrete p-Laplacian: energy, Galerkin residual, Dirichlet solver and
//! the first eigenpair.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh_fem::{DiscreteField, FemSpace};
use crate::quadrature::dunavant7;

/// Solver settings for `−Δ_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlapConfig {
    pub p: f64,
    /// Relative gradient smoothing: the final τ is `tau` times the gradient
    /// scale of the problem.
    pub tau: f64,
    /// Tolerance on the dual residual norm, relative to the load's dual norm.
    pub tol_residual: f64,
    pub max_iter: usize,
    /// Initial step of the energy line search.
    pub damping: f64,
    /// Use Newton directions instead of frozen-coefficient (Kačanov) steps.
    pub newton: bool,
    /// Permits `p ≥ 2` for comparisons against linear oracles.
    pub validation_mode: bool,
}

impl PlapConfig {
    pub fn new(p: f64) -> Self {
        PlapConfig {
            p,
            tau: 1e-8,
            tol_residual: 1e-10,
            max_iter: 400,
            damping: 1.0,
            newton: false,
            validation_mode: p >= 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 1.0) || !self.p.is_finite() {
            return Err(Error::constraint("p", format!("must exceed 1, got {}", self.p)));
        }
        if self.p >= 2.0 && !self.validation_mode {
            return Err(Error::constraint(
                "p",
                format!("{} is outside 1 < p < N = 2; enable validation mode for p ≥ 2", self.p),
            ));
        }
        if !(self.tau >= 0.0) {
            return Err(Error::constraint("tau", "must be nonnegative"));
        }
        if self.tau == 0.0 && self.p != 2.0 {
            return Err(Error::constraint("tau", "must be positive unless p = 2"));
        }
        if !(self.tol_residual > 0.0) {
            return Err(Error::constraint("tol_residual", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::constraint("max_iter", "must be positive"));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::constraint("damping", "must lie in (0,1]"));
        }
        Ok(())
    }
}

#[inline]
fn norm2(g: [f64; 2]) -> f64 {
    g[0] * g[0] + g[1] * g[1]
}

/// Coefficient `(|g|²+τ²)^{(p−2)/2}`, with the `τ = 0`, `g = 0` flux taken as zero.
#[inline]
fn coefficient(g2: f64, p: f64, tau: f64) -> f64 {
    let s = g2 + tau * tau;
    if s == 0.0 {
        0.0
    } else {
        s.powf(0.5 * (p - 2.0))
    }
}

/// `(1/p) ∫ |∇u|^p` (exact for P1).
pub fn energy(u: &DiscreteField, p: f64) -> f64 {
    smoothed_energy(u.space(), u.values(), p, 0.0)
}

fn smoothed_energy(space: &FemSpace, values: &[f64], p: f64, tau: f64) -> f64 {
    let parts: Vec<f64> = (0..space.mesh().n_triangles())
        .into_par_iter()
        .map(|e| {
            let g = space.gradient(e, values);
            space.area(e) * (norm2(g) + tau * tau).powf(0.5 * p)
        })
        .collect();
    parts.iter().sum::<f64>() / p
}

fn operator(space: &FemSpace, values: &[f64], p: f64, tau: f64) -> Vec<f64> {
    let locals: Vec<[f64; 3]> = (0..space.mesh().n_triangles())
        .into_par_iter()
        .map(|e| {
            let g = space.gradient(e, values);
            let w = space.area(e) * coefficient(norm2(g), p, tau);
            let hg = space.hat_gradients(e);
            std::array::from_fn(|k| w * (g[0] * hg[k][0] + g[1] * hg[k][1]))
        })
        .collect();
    space.scatter(&locals)
}

/// `⟨A_p^τ(u), ψ_i⟩ − rhs_i` over the interior hat functions.
pub fn apply_plap_residual(u: &DiscreteField, rhs: &[f64], p: f64, tau: f64) -> Result<Vec<f64>> {
    let space = u.space();
    if rhs.len() != space.n_dofs() {
        return Err(Error::Type(format!(
            "dual vector has length {} but the space has {} dofs",
            rhs.len(),
            space.n_dofs()
        )));
    }
    let mut r = operator(space, u.values(), p, tau);
    for (a, b) in r.iter_mut().zip(rhs) {
        *a -= b;
    }
    Ok(r)
}

/// `∫ |u|^{p−2} u ψ_i` with the seven-point rule.
pub fn eigen_load(u: &DiscreteField, p: f64) -> Vec<f64> {
    let rule = dunavant7();
    u.space().load(|e, q, _| {
        let v = u.eval_bary(e, &rule.points[q]);
        v.signum() * v.abs().powf(p - 1.0)
    })
}

/// Convergence record of [`solve_plap_dirichlet_with_stats`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final dual residual norm relative to the load.
    pub residual: f64,
    pub tau: f64,
    /// Smoothed energy after every accepted step of the final stage.
    pub energies: Vec<f64>,
}

/// Solves `−Δ_p^τ u = rhs` with `u = 0` on the boundary.
pub fn solve_plap_dirichlet(rhs: &[f64], cfg: &PlapConfig, init: &DiscreteField) -> Result<DiscreteField> {
    solve_plap_dirichlet_with_stats(rhs, cfg, init).map(|(u, _)| u)
}

/// As [`solve_plap_dirichlet`], also returning convergence data.
///
/// Each stage of the τ continuation minimises the smoothed energy with
/// frozen-coefficient (or Newton) directions and a backtracking line search.
pub fn solve_plap_dirichlet_with_stats(
    rhs: &[f64],
    cfg: &PlapConfig,
    init: &DiscreteField,
) -> Result<(DiscreteField, SolveStats)> {
    cfg.validate()?;
    let space = Arc::clone(init.space());
    if rhs.len() != space.n_dofs() {
        return Err(Error::Type("load vector does not match the space".into()));
    }
    if rhs.iter().all(|&b| b == 0.0) {
        return Ok((DiscreteField::zeros(&space), SolveStats::default()));
    }
    let p = cfg.p;
    let b_norm = space.dual_norm(rhs);

    let init_scale = init.grad_sup_norm();
    let scale = if init_scale > 0.0 {
        init_scale
    } else {
        let lin = DiscreteField::from_interior(&space, &space.laplace_solve(rhs));
        lin.grad_sup_norm().powf(1.0 / (p - 1.0))
    };
    let tau_final = cfg.tau * scale;
    let stages: Vec<f64> = if tau_final == 0.0 {
        vec![0.0]
    } else {
        vec![tau_final * 1e6, tau_final * 1e3, tau_final]
    };

    let mut u = DiscreteField::from_interior(&space, &init.interior_values());
    let mut stats = SolveStats::default();
    for (stage, &tau) in stages.iter().enumerate() {
        let last = stage + 1 == stages.len();
        let tol = if last { cfg.tol_residual } else { cfg.tol_residual.sqrt().max(cfg.tol_residual) };
        stats = minimise_stage(&space, rhs, b_norm, cfg, tau, tol, &mut u)?;
    }
    Ok((u, stats))
}

fn minimise_stage(
    space: &Arc<FemSpace>,
    rhs: &[f64],
    b_norm: f64,
    cfg: &PlapConfig,
    tau: f64,
    tol: f64,
    u: &mut DiscreteField,
) -> Result<SolveStats> {
    let p = cfg.p;
    let ne = space.mesh().n_triangles();
    let energy_of = |vals: &[f64]| -> f64 {
        let lin: f64 = space
            .interior()
            .iter()
            .zip(rhs)
            .map(|(&v, b)| vals[v] * b)
            .sum();
        smoothed_energy(space, vals, p, tau) - lin
    };
    let mut j = energy_of(u.values());
    let mut stats = SolveStats {
        tau,
        energies: vec![j],
        ..SolveStats::default()
    };
    for it in 0..cfg.max_iter {
        let mut r = operator(space, u.values(), p, tau);
        for (a, b) in r.iter_mut().zip(rhs) {
            *a -= b;
        }
        let rel = space.dual_norm(&r) / b_norm;
        stats.iterations = it;
        stats.residual = rel;
        if rel <= tol {
            return Ok(stats);
        }
        let grads = u.gradients();
        let direction: Vec<f64> = if cfg.newton {
            let tensors: Vec<[[f64; 2]; 2]> = grads
                .iter()
                .map(|&g| {
                    let s = norm2(g) + tau * tau;
                    let w = coefficient(norm2(g), p, tau);
                    let c = if s > 0.0 { (p - 2.0) / s } else { 0.0 };
                    [
                        [w * (1.0 + c * g[0] * g[0]), w * c * g[0] * g[1]],
                        [w * c * g[0] * g[1], w * (1.0 + c * g[1] * g[1])],
                    ]
                })
                .collect();
            let h = space.tensor_stiffness(&tensors);
            let d = space.factor(&h)?.solve(&r);
            d.iter().map(|x| -x).collect()
        } else {
            let w: Vec<f64> = (0..ne).map(|e| coefficient(norm2(grads[e]), p, tau)).collect();
            let k = space.weighted_stiffness(&w);
            let v = space.factor(&k)?.solve(rhs);
            let cur = u.interior_values();
            v.iter().zip(&cur).map(|(a, b)| a - b).collect()
        };

        let base = u.interior_values();
        let mut t = cfg.damping;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = base.iter().zip(&direction).map(|(a, d)| a + t * d).collect();
            let cand = DiscreteField::from_interior(space, &trial);
            let jt = energy_of(cand.values());
            if jt <= j + 1e-14 * j.abs() {
                accepted = Some((cand, jt));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, jt)) = accepted else {
            return Err(Error::Convergence {
                context: format!("line search stalled (tau = {tau:.3e})"),
                iterations: it,
                last_residual: rel,
            });
        };
        *u = cand;
        j = jt;
        stats.energies.push(j);
    }
    Err(Error::Convergence {
        context: format!("p-Laplace solve (tau = {tau:.3e})"),
        iterations: cfg.max_iter,
        last_residual: stats.residual,
    })
}

/// First eigenpair of `−Δ_p` with `‖φ₁‖_p = 1` and `φ₁ > 0`.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub lambda1: f64,
    pub phi1: DiscreteField,
    pub iterations: usize,
    /// Dual norm of `A_p(φ₁) − λ₁φ₁^{p−1}` relative to the second term.
    pub residual: f64,
}

const EIGEN_TOL: f64 = 1e-8;
/// Bound on [`EigenPair::residual`].
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-8;
const EIGEN_MAX_ITER: usize = 500;

/// Inverse power iteration started from the constant interior field.
pub fn first_eigenpair(cfg: &PlapConfig, space: &Arc<FemSpace>) -> Result<EigenPair> {
    let init = DiscreteField::from_interior(space, &vec![1.0; space.n_dofs()]);
    first_eigenpair_from(cfg, &init)
}

/// Inverse power iteration from `init`: solve `A(v) = λ_k |u_k|^{p−2}u_k`,
/// normalise in `L^p`, update `λ` by the Rayleigh quotient.
pub fn first_eigenpair_from(cfg: &PlapConfig, init: &DiscreteField) -> Result<EigenPair> {
    cfg.validate()?;
    let p = cfg.p;
    let space = Arc::clone(init.space());
    let normalise = |v: &DiscreteField| -> Result<DiscreteField> {
        let n = v.lp_norm(p);
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Domain("eigen iterate vanished".into()));
        }
        let mean: f64 = v.values().iter().sum();
        Ok(v.scaled(mean.signum() / n))
    };
    let rayleigh = |v: &DiscreteField| v.grad_lp_norm(p).powf(p) / v.lp_norm(p).powf(p);

    let mut u = normalise(&DiscreteField::from_interior(&space, &init.interior_values()))?;
    let mut lambda = rayleigh(&u);
    let mut restarted = false;
    for it in 1..=EIGEN_MAX_ITER {
        let load: Vec<f64> = eigen_load(&u, p).iter().map(|x| lambda * x).collect();
        let v = solve_plap_dirichlet(&load, cfg, &u)?;
        let v = normalise(&v)?;
        let peak = v.sup_norm();
        if v.interior_values().iter().any(|&x| x < -1e-8 * peak) {
            if restarted {
                return Err(Error::Convergence {
                    context: "eigen iterate changes sign after restart".into(),
                    iterations: it,
                    last_residual: f64::NAN,
                });
            }
            restarted = true;
            u = normalise(&DiscreteField::from_interior(&space, &vec![1.0; space.n_dofs()]))?;
            lambda = rayleigh(&u);
            continue;
        }
        let next = rayleigh(&v);
        let change = (next - lambda).abs() / lambda;
        u = v;
        lambda = next;
        if change < EIGEN_TOL {
            let load: Vec<f64> = eigen_load(&u, p).iter().map(|x| lambda * x).collect();
            let r = apply_plap_residual(&u, &load, p, cfg.tau * u.grad_sup_norm())?;
            let residual = space.dual_norm(&r) / space.dual_norm(&load);
            if residual <= EIGEN_RESIDUAL_TOL {
                return Ok(EigenPair {
                    lambda1: lambda,
                    phi1: u,
                    iterations: it,
                    residual,
                });
            }
        }
    }
    Err(Error::Convergence {
        context: "inverse power iteration".into(),
        iterations: EIGEN_MAX_ITER,
        last_residual: f64::NAN,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::{build_mesh, unit_square};
    use std::f64::consts::PI;

    fn space(h: f64) -> Arc<FemSpace> {
        FemSpace::new(Arc::new(build_mesh(&unit_square(), h).unwrap())).unwrap()
    }

    #[test]
    fn energy_of_linear_fields() {
        let s = space(0.25);
        let u = DiscreteField::interpolate(&s, |x| x[0]);
        assert!((energy(&u, 2.0) - 0.5).abs() < 1e-14);
        assert!((energy(&u, 1.5) - 1.0 / 1.5).abs() < 1e-14);
        assert_eq!(energy(&DiscreteField::zeros(&s), 1.5), 0.0);
    }

    #[test]
    fn p2_residual_is_stiffness_times_u() {
        let s = space(0.2);
        let u = DiscreteField::interpolate(&s, |x| (x[0] * x[1] * (1.0 - x[0]) * (1.0 - x[1])).sqrt());
        let rhs: Vec<f64> = (0..s.n_dofs()).map(|i| (i % 3) as f64).collect();
        let r = apply_plap_residual(&u, &rhs, 2.0, 0.0).unwrap();
        let k = s.weighted_stiffness(&vec![1.0; s.mesh().n_triangles()]);
        let ku = k.mul_vec(&u.interior_values());
        for i in 0..s.n_dofs() {
            assert!((r[i] - (ku[i] - rhs[i])).abs() < 1e-12);
        }
        assert!(apply_plap_residual(&u, &rhs[1..], 2.0, 0.0).is_err());
    }

    #[test]
    fn p2_solve_matches_linear_solve() {
        let s = space(0.1);
        let b = s.load(|_, _, _| 1.0);
        let u = solve_plap_dirichlet(&b, &PlapConfig::new(2.0), &DiscreteField::zeros(&s)).unwrap();
        let k = s.weighted_stiffness(&vec![1.0; s.mesh().n_triangles()]);
        // dense oracle
        let n = s.n_dofs();
        let mut dense = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for &j in s.pattern().row(i) {
                dense[(i, j)] = k.get(i, j);
            }
        }
        let x = dense.lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        let ui = u.interior_values();
        for i in 0..n {
            assert!((ui[i] - x[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_load_gives_zero() {
        let s = space(0.25);
        let init = DiscreteField::from_interior(&s, &vec![0.3; s.n_dofs()]);
        let u = solve_plap_dirichlet(&vec![0.0; s.n_dofs()], &PlapConfig::new(1.5), &init).unwrap();
        assert_eq!(u.sup_norm(), 0.0);
    }

    #[test]
    fn kacanov_and_newton_agree() {
        let s = space(0.1);
        let b = s.load(|_, _, x| 1.0 + x[0]);
        let mut cfg = PlapConfig::new(1.5);
        let (u1, st1) = solve_plap_dirichlet_with_stats(&b, &cfg, &DiscreteField::zeros(&s)).unwrap();
        cfg.newton = true;
        let (u2, _) = solve_plap_dirichlet_with_stats(&b, &cfg, &DiscreteField::zeros(&s)).unwrap();
        assert!(u1.minus(&u2).unwrap().sup_norm() < 1e-7 * u1.sup_norm());
        assert!(st1.residual <= cfg.tol_residual);
        for w in st1.energies.windows(2) {
            assert!(w[1] <= w[0] + 1e-14 * w[0].abs());
        }
    }

    #[test]
    fn p2_eigenpair_coarse() {
        let s = space(1.0 / 16.0);
        let eig = first_eigenpair(&PlapConfig::new(2.0), &s).unwrap();
        assert!((eig.lambda1 - 2.0 * PI * PI).abs() < 0.05 * 2.0 * PI * PI);
        assert!((eig.phi1.lp_norm(2.0) - 1.0).abs() < 1e-10);
        let rq = eig.phi1.grad_lp_norm(2.0).powi(2) / eig.phi1.lp_norm(2.0).powi(2);
        assert!((rq - eig.lambda1).abs() < 1e-8 * eig.lambda1);
        assert!(eig.phi1.interior_values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn eigen_identity_holds_weakly() {
        let s = space(0.125);
        let cfg = PlapConfig::new(1.5);
        let eig = first_eigenpair(&cfg, &s).unwrap();
        for k in [0.01, 1.0, 7.0] {
            let u = eig.phi1.scaled(k);
            let rhs: Vec<f64> = eigen_load(&u, 1.5).iter().map(|x| eig.lambda1 * x).collect();
            let r = apply_plap_residual(&u, &rhs, 1.5, 0.0).unwrap();
            let rel = s.dual_norm(&r) / s.dual_norm(&rhs);
            assert!(rel < 1e-4, "k={k}: {rel}");
        }
    }
}
