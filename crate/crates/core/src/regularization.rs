//! Mollifiers, the truncation `f̃(x,s) = f(max{ū(x), s})`, the regularized
//! reactions `F_ε`, `G_ε` and sampled growth-bound verification.
//!
//! `f` is truncated first and mollified second; `g` is mollified and then
//! composed with `∇T(u)`, `T(u) = max{u, ū}`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mesh_fem::{DiscreteField, DistanceField, Point};
use crate::problem_def::{NonlinearitySpec, VectorForm};
use crate::quadrature::{gauss_legendre, GaussLegendre};

/// Nodes per sub-interval of the convolution rules.
pub const CONV_NODES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MollifierKind {
    Scalar,
    Vector,
}

/// Radial bump `η_ε(z) = c ε^{−N} exp(1/(|z/ε|²−1))` supported in `B_ε(0)`.
#[derive(Debug, Clone, Copy)]
pub struct Mollifier {
    epsilon: f64,
    dim: usize,
    norm: f64,
}

fn profile(t2: f64) -> f64 {
    if t2 < 1.0 {
        (1.0 / (t2 - 1.0)).exp()
    } else {
        0.0
    }
}

/// Composite Gauss–Legendre on `[a, b]` with `pieces` panels.
fn composite(a: f64, b: f64, pieces: usize, f: impl Fn(f64) -> f64) -> f64 {
    let rule = gauss_legendre(CONV_NODES);
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| rule.integrate(a + k as f64 * h, a + (k + 1) as f64 * h, &f))
        .sum()
}

/// Surface measure of the unit sphere in `ℝᴺ`.
fn sphere_area(n: usize) -> f64 {
    use std::f64::consts::PI;
    match n {
        1 => 2.0,
        2 => 2.0 * PI,
        _ => 2.0 * PI / (n - 2) as f64 * sphere_area(n - 2),
    }
}

impl Mollifier {
    fn new(epsilon: f64, dim: usize) -> Mollifier {
        let mass = if dim == 1 {
            composite(-1.0, 1.0, 16, |t| profile(t * t))
        } else {
            sphere_area(dim) * composite(0.0, 1.0, 16, |r| profile(r * r) * r.powi(dim as i32 - 1))
        };
        Mollifier {
            epsilon,
            dim,
            norm: 1.0 / mass,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> MollifierKind {
        if self.dim == 1 {
            MollifierKind::Scalar
        } else {
            MollifierKind::Vector
        }
    }

    /// Support radius (equal to `ε`).
    pub fn support_radius(&self) -> f64 {
        self.epsilon
    }

    /// Base rule of the convolution quadrature.
    pub fn rule(&self) -> &'static GaussLegendre {
        gauss_legendre(CONV_NODES)
    }

    /// `ρ_ε(t)` for the scalar kernel.
    pub fn density1(&self, t: f64) -> f64 {
        let r = t / self.epsilon;
        self.norm * profile(r * r) / self.epsilon
    }

    pub fn density(&self, z: &[f64]) -> f64 {
        let r2 = z.iter().map(|v| v * v).sum::<f64>() / (self.epsilon * self.epsilon);
        self.norm * profile(r2) / self.epsilon.powi(self.dim as i32)
    }

    /// Total mass by an independent composite rule over `B_ε(0)`.
    pub fn mass(&self) -> f64 {
        let pieces = if self.dim <= 2 { 8 } else { 2 };
        let eps = self.epsilon;
        let mut z = vec![0.0; self.dim];
        fn rec(m: &Mollifier, k: usize, z: &mut Vec<f64>, left: f64, pieces: usize) -> f64 {
            if k == z.len() {
                return m.density(z);
            }
            let w = left.max(0.0).sqrt();
            let rule = gauss_legendre(CONV_NODES);
            let h = 2.0 * w / pieces as f64;
            let mut s = 0.0;
            for j in 0..pieces {
                for (t, wt) in rule.mapped(-w + j as f64 * h, -w + (j + 1) as f64 * h) {
                    z[k] = t;
                    s += wt * rec(m, k + 1, z, left - t * t, pieces);
                }
            }
            s
        }
        rec(self, 0, &mut z, eps * eps, pieces)
    }
}

/// Scalar kernel `ρ_ε` and vector kernel `η_ε` on `ℝᴺ`.
pub fn make_mollifiers(epsilon: f64, n: usize) -> Result<(Mollifier, Mollifier)> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Argument(format!("epsilon must lie in (0,1), got {epsilon}")));
    }
    if n == 0 {
        return Err(Error::Argument("dimension must be positive".into()));
    }
    Ok((Mollifier::new(epsilon, 1), Mollifier::new(epsilon, n)))
}

/// `f̃(x, s) = f(max{ū(x), s})`.
#[derive(Debug, Clone)]
pub struct TruncatedF {
    base: NonlinearitySpec,
    floor: DiscreteField,
}

pub fn truncate_f(f: &NonlinearitySpec, subsolution: &DiscreteField) -> Result<TruncatedF> {
    if !f.is_scalar() {
        return Err(Error::Type("truncation needs a scalar f".into()));
    }
    let space = subsolution.space();
    if let Some(&v) = space.interior().iter().find(|&&v| !(subsolution.values()[v] > 0.0)) {
        return Err(Error::Precondition(format!(
            "sub-solution is not positive at interior vertex {v} (value {})",
            subsolution.values()[v]
        )));
    }
    Ok(TruncatedF {
        base: f.clone(),
        floor: subsolution.clone(),
    })
}

impl TruncatedF {
    pub fn base(&self) -> &NonlinearitySpec {
        &self.base
    }

    pub fn floor(&self) -> &DiscreteField {
        &self.floor
    }

    /// `ū(x)` at a point of the mesh.
    pub fn floor_at(&self, x: Point) -> Result<f64> {
        let mesh = self.floor.space().mesh();
        let (e, b) = mesh
            .locate(x)
            .ok_or_else(|| Error::Domain(format!("point {x:?} lies outside the mesh")))?;
        Ok(self.floor.eval_bary(e, &b))
    }

    pub fn eval_with_floor(&self, floor: f64, s: f64) -> f64 {
        self.base.eval_scalar(floor.max(s))
    }

    pub fn eval(&self, x: Point, s: f64) -> Result<f64> {
        Ok(self.eval_with_floor(self.floor_at(x)?, s))
    }
}

/// `(f̃(x,·) ∗ ρ_ε)(s)` for a point where `ū(x) = floor`.
///
/// `[s−ε, s+ε]` is split at `floor` and at declared points above it; each
/// panel uses the 32-point rule and the result is divided by the discrete
/// kernel mass of the same nodes.
pub fn f_eps_with_floor(tf: &TruncatedF, rho: &Mollifier, floor: f64, s: f64) -> f64 {
    let eps = rho.epsilon();
    let (a, b) = (s - eps, s + eps);
    let mut cuts = vec![a, b];
    if floor > a && floor < b {
        cuts.push(floor);
    }
    cuts.extend(tf.base.declared_points().iter().copied().filter(|&d| d > floor && d > a && d < b));
    cuts.sort_by(f64::total_cmp);
    let f_floor = tf.base.eval_scalar(floor);
    let rule = rho.rule();
    let (mut num, mut den) = (0.0, 0.0);
    for w in cuts.windows(2) {
        for (t, wt) in rule.mapped(w[0], w[1]) {
            let k = wt * rho.density1(s - t);
            if k == 0.0 {
                continue;
            }
            let v = if t <= floor { f_floor } else { tf.base.eval_scalar(t) };
            num += k * v;
            den += k;
        }
    }
    num / den
}

/// `f̃_ε(x, s)` at a point of the mesh.
pub fn eval_f_eps(tf: &TruncatedF, mf: &Mollifier, x: Point, s: f64) -> Result<f64> {
    if mf.kind() != MollifierKind::Scalar {
        return Err(Error::Type("f needs the scalar mollifier".into()));
    }
    Ok(f_eps_with_floor(tf, mf, tf.floor_at(x)?, s))
}

/// `(g ∗ η_ε)(ξ)` by iterated Gauss–Legendre over `B_ε(0)`, splitting each
/// axis where `ξ_i − z_i` crosses a declared coordinate. Product forms
/// multiply factor values along the recursion.
pub fn eval_g_eps(g: &NonlinearitySpec, mf: &Mollifier, xi: &[f64]) -> f64 {
    assert_eq!(xi.len(), g.dim(), "argument dimension");
    assert_eq!(mf.dim(), g.dim(), "mollifier dimension");
    let eps = mf.epsilon();
    let cuts: Vec<Vec<f64>> = g
        .declared_axes()
        .iter()
        .zip(xi)
        .map(|(ivs, &x)| {
            let mut c: Vec<f64> = ivs.iter().flat_map(|&(a, b)| [x - a, x - b]).collect();
            c.sort_by(f64::total_cmp);
            c.dedup();
            c
        })
        .collect();
    let factors = match g.form() {
        Some(VectorForm::Product(fs)) => Some(fs),
        _ => None,
    };
    let rule = mf.rule();
    let mut z = vec![0.0; xi.len()];
    let mut point = vec![0.0; xi.len()];

    #[allow(clippy::too_many_arguments)]
    fn rec(
        k: usize,
        left: f64,
        partial: f64,
        z: &mut Vec<f64>,
        point: &mut Vec<f64>,
        ctx: &(&NonlinearitySpec, &Mollifier, &[f64], &[Vec<f64>], Option<&Vec<crate::problem_def::Piecewise1d>>, &GaussLegendre),
    ) -> (f64, f64) {
        let (g, mf, xi, cuts, factors, rule) = *ctx;
        if k == z.len() {
            let kern = mf.density(z);
            let v = match factors {
                Some(_) => partial * g.scale(),
                None => g.eval_vector(point),
            };
            return (kern * v, kern);
        }
        let w = left.max(0.0).sqrt();
        let mut ends = vec![-w, w];
        ends.extend(cuts[k].iter().copied().filter(|&c| c > -w && c < w));
        ends.sort_by(f64::total_cmp);
        let (mut num, mut den) = (0.0, 0.0);
        for seg in ends.windows(2) {
            for (t, wt) in rule.mapped(seg[0], seg[1]) {
                z[k] = t;
                point[k] = xi[k] - t;
                let p = match factors {
                    Some(fs) => partial * fs[k].eval_factor(point[k]),
                    None => partial,
                };
                let (n, d) = rec(k + 1, left - t * t, p, z, point, ctx);
                num += wt * n;
                den += wt * d;
            }
        }
        (num, den)
    }

    let ctx = (g, mf, xi, cuts.as_slice(), factors, rule);
    let (num, den) = rec(0, eps * eps, 1.0, &mut z, &mut point, &ctx);
    num / den
}

/// `∇T(u)` per element with `T(u) = max{u, ū}` resolved by nodal majority,
/// and a flag for elements where `u − ū` changes sign.
pub fn truncated_gradients(u: &DiscreteField, floor: &DiscreteField) -> Result<(Vec<[f64; 2]>, Vec<bool>)> {
    if !u.same_space(floor) {
        return Err(Error::Type("fields live on different spaces".into()));
    }
    let mesh = u.space().mesh();
    let out: Vec<([f64; 2], bool)> = (0..mesh.n_triangles())
        .map(|e| {
            let tri = mesh.triangles()[e];
            let above = tri.iter().filter(|&&v| u.values()[v] >= floor.values()[v]).count();
            let g = if above >= 2 { u.gradient(e) } else { floor.gradient(e) };
            (g, above == 1 || above == 2)
        })
        .collect();
    Ok(out.into_iter().unzip())
}

/// `F_ε` and `G_ε` for one `ε`.
#[derive(Debug, Clone)]
pub struct RegularizedReactions {
    f: TruncatedF,
    g: NonlinearitySpec,
    rho: Mollifier,
    eta: Mollifier,
}

/// `F_ε(u)` at the seven quadrature points of each element and `G_ε(∇T(u))`
/// per element.
#[derive(Debug, Clone)]
pub struct ReactionSamples {
    pub f: Vec<[f64; 7]>,
    pub g: Vec<f64>,
    pub crossing: Vec<bool>,
}

impl RegularizedReactions {
    pub fn new(f: TruncatedF, g: NonlinearitySpec, epsilon: f64) -> Result<Self> {
        if g.is_scalar() {
            return Err(Error::Type("g must take a vector argument".into()));
        }
        let (rho, eta) = make_mollifiers(epsilon, g.dim())?;
        Ok(RegularizedReactions { f, g, rho, eta })
    }

    pub fn epsilon(&self) -> f64 {
        self.rho.epsilon()
    }

    pub fn truncated(&self) -> &TruncatedF {
        &self.f
    }

    pub fn g_spec(&self) -> &NonlinearitySpec {
        &self.g
    }

    pub fn rho(&self) -> &Mollifier {
        &self.rho
    }

    pub fn eta(&self) -> &Mollifier {
        &self.eta
    }

    pub fn f_eps(&self, floor: f64, s: f64) -> f64 {
        f_eps_with_floor(&self.f, &self.rho, floor, s)
    }

    pub fn g_eps(&self, xi: &[f64]) -> f64 {
        eval_g_eps(&self.g, &self.eta, xi)
    }

    pub fn sample(&self, u: &DiscreteField) -> Result<ReactionSamples> {
        let floor = self.f.floor();
        let (grads, crossing) = truncated_gradients(u, floor)?;
        let uq = u.quadrature_values();
        let fq = floor.quadrature_values();
        let f: Vec<[f64; 7]> = uq
            .par_iter()
            .zip(&fq)
            .map(|(us, fs)| std::array::from_fn(|q| self.f_eps(fs[q], us[q])))
            .collect();
        let g: Vec<f64> = grads.par_iter().map(|xi| self.g_eps(xi)).collect();
        Ok(ReactionSamples { f, g, crossing })
    }
}

/// Constants of the growth bounds
/// `f̃_ε(x,s) ≤ (L_f+σ)|s|^{p−1} + C_σ d(x)^{−γ}` and
/// `g_ε(ξ) ≤ (L_g+σ)|ξ|^{p−1} + C′_σ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthConstants {
    pub p: f64,
    pub gamma: f64,
    pub lf: f64,
    pub lg: f64,
    pub sigma: f64,
    /// `c_σ` for `f`, after absorbing the truncation.
    pub c_sigma_f: f64,
    pub c_prime_f: f64,
    pub c_sigma_g: f64,
    pub c_prime_g: f64,
    /// Sampled `inf ū/d`.
    pub l: f64,
    pub diam: f64,
    /// `c_σ l^{−γ} + c′_σ diam(Ω)^γ`.
    pub big_c: f64,
    /// `c_σ + c′_σ` for `g`.
    pub big_c_prime: f64,
}

/// `sup_{t≥0} a(t+1)^q − b t^q` for `0 < a < b`.
pub fn shift_constant(a: f64, b: f64, q: f64) -> f64 {
    if q <= 1.0 {
        return a;
    }
    let t = 1.0 / ((b / a).powf(1.0 / (q - 1.0)) - 1.0);
    a.max(a * (t + 1.0).powf(q) - b * t.powf(q))
}

fn f_grid(f: &NonlinearitySpec) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=4000).map(|k| 2f64.powf(-30.0 + 50.0 * k as f64 / 4000.0)).collect();
    for &d in f.declared_points() {
        for k in 1..=40 {
            let off = d * 0.5f64.powi(k);
            g.push(d - off);
            g.push(d + off);
        }
        g.push(d);
    }
    g
}

fn g_grid(g: &NonlinearitySpec) -> Vec<Vec<f64>> {
    let n = g.dim();
    let mut pts = vec![vec![0.0; n]];
    let dirs: Vec<Vec<f64>> = if n == 2 {
        (0..64)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
                vec![t.cos(), t.sin()]
            })
            .collect()
    } else {
        (0..n)
            .flat_map(|i| {
                [1.0, -1.0].map(|s| {
                    let mut v = vec![0.0; n];
                    v[i] = s;
                    v
                })
            })
            .collect()
    };
    for k in -160..=160 {
        let r = 2f64.powf(k as f64 / 8.0);
        for d in &dirs {
            pts.push(d.iter().map(|c| c * r).collect());
        }
    }
    // both sides of every declared coordinate
    for (i, ivs) in g.declared_axes().iter().enumerate() {
        for &(a, b) in ivs {
            for c in [a, b] {
                for off in [-1e-9, 0.0, 1e-9] {
                    for other in [-2.0, -0.5, 0.0, 0.5, 2.0] {
                        let mut x = vec![other; n];
                        x[i] = c + off;
                        pts.push(x);
                    }
                }
            }
        }
    }
    pts
}

/// Computes the constants of the growth bounds from sampled suprema.
///
/// `c_σ` for `f` is the sampled `sup s^γ [f(s) − (L_f+σ/2)s^{p−1}]₊` enlarged
/// by `(L_f+σ/2)‖ū‖_∞^{p−1+γ}` to cover the truncation; `c′_σ` is the exact
/// `sup (L+σ/2)(t+1)^{p−1} − (L+σ)t^{p−1}`; `l` is the sampled `inf ū/d` over
/// interior vertices and barycentric lattice points of every element.
#[allow(clippy::too_many_arguments)]
pub fn compute_growth_constants(
    f: &NonlinearitySpec,
    g: &NonlinearitySpec,
    floor: &DiscreteField,
    dist: &DistanceField,
    lf: f64,
    lg: f64,
    sigma: f64,
    p: f64,
    gamma: f64,
) -> Result<GrowthConstants> {
    if !(sigma > 0.0) {
        return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Argument(format!("gamma must lie in (0,1), got {gamma}")));
    }
    if !(lf.is_finite() && lg.is_finite()) {
        return Err(Error::Argument("growth rates must be finite".into()));
    }
    let q = p - 1.0;
    let af = lf + 0.5 * sigma;
    let c_raw = f_grid(f)
        .iter()
        .map(|&s| s.powf(gamma) * (f.eval_scalar(s) - af * s.powf(q)).max(0.0))
        .fold(0.0, f64::max);
    let c_sigma_f = c_raw + af * floor.sup_norm().powf(q + gamma);
    let c_prime_f = shift_constant(af, lf + sigma, q);

    let ag = lg + 0.5 * sigma;
    let c_sigma_g = g_grid(g)
        .iter()
        .map(|x| (g.eval_vector(x) - ag * norm(x).powf(q)).max(0.0))
        .fold(0.0, f64::max);
    let c_prime_g = shift_constant(ag, lg + sigma, q);

    let l = floor_distance_ratio(floor, dist, &[]);
    if !(l > 0.0) {
        return Err(Error::Precondition("sub-solution does not dominate a multiple of d".into()));
    }
    let diam = dist.domain_diameter();
    Ok(GrowthConstants {
        p,
        gamma,
        lf,
        lg,
        sigma,
        c_sigma_f,
        c_prime_f,
        c_sigma_g,
        c_prime_g,
        l,
        diam,
        big_c: c_sigma_f * l.powf(-gamma) + c_prime_f * diam.powf(gamma),
        big_c_prime: c_sigma_g + c_prime_g,
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Sampled `inf ū/d` over interior vertices, an order-8 barycentric lattice
/// of every element and the extra points `(element, bary)`.
pub fn floor_distance_ratio(floor: &DiscreteField, dist: &DistanceField, extra: &[(usize, [f64; 3])]) -> f64 {
    let mesh = floor.space().mesh();
    let m = 8;
    let mut lattice = Vec::new();
    for i in 0..=m {
        for j in 0..=m - i {
            let k = m - i - j;
            lattice.push([i as f64 / m as f64, j as f64 / m as f64, k as f64 / m as f64]);
        }
    }
    let ratio = |e: usize, b: &[f64; 3]| -> f64 {
        let t = mesh.element(e);
        let x = crate::quadrature::bary_to_point(&t, b);
        let d = dist.eval_in(e, x);
        if d < 1e-12 {
            f64::INFINITY
        } else {
            floor.eval_bary(e, b) / d
        }
    };
    let base = (0..mesh.n_triangles())
        .into_par_iter()
        .map(|e| lattice.iter().map(|b| ratio(e, b)).fold(f64::INFINITY, f64::min))
        .reduce(|| f64::INFINITY, f64::min);
    extra.iter().map(|(e, b)| ratio(*e, b)).fold(base, f64::min)
}

/// Largest sampled violations of the two growth bounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    pub samples: usize,
    pub f_max_violation: f64,
    pub g_max_violation: f64,
    pub worst_f: (Point, f64),
    pub worst_g: Vec<f64>,
}

impl GrowthReport {
    pub fn max_violation(&self) -> f64 {
        self.f_max_violation.max(self.g_max_violation)
    }
}

/// Checks both growth bounds at `samples` seeded random points: `x` uniform
/// in a random element, `s` log-uniform in `[10⁻⁴, 10²]` (one in five
/// negative or within `ε` of 0), `ξ` with log-uniform length in
/// `[10⁻⁴, 10³]` and uniform direction.
pub fn growth_bounds_check(
    reactions: &RegularizedReactions,
    dist: &DistanceField,
    constants: &GrowthConstants,
    samples: usize,
    seed: u64,
) -> Result<GrowthReport> {
    let floor = reactions.truncated().floor();
    let space = Arc::clone(floor.space());
    let mesh = space.mesh();
    let n = reactions.g_spec().dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = reactions.epsilon();
    let cases: Vec<(usize, [f64; 3], f64, Vec<f64>)> = (0..samples)
        .map(|k| {
            let e = rng.gen_range(0..mesh.n_triangles());
            let (a, b): (f64, f64) = (rng.gen(), rng.gen());
            let (a, b) = if a + b > 1.0 { (1.0 - a, 1.0 - b) } else { (a, b) };
            let bary = [a, b, 1.0 - a - b];
            let s = match k % 5 {
                0 => rng.gen_range(-eps..eps),
                1 => -(10f64.powf(rng.gen_range(-4.0..2.0))),
                _ => 10f64.powf(rng.gen_range(-4.0..2.0)),
            };
            let r = 10f64.powf(rng.gen_range(-4.0..3.0));
            let mut dir: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let len = norm(&dir).max(1e-300);
            dir.iter_mut().for_each(|v| *v *= r / len);
            (e, bary, s, dir)
        })
        .collect();
    let q = constants.p - 1.0;
    let results: Vec<(f64, Point, f64, f64)> = cases
        .par_iter()
        .map(|(e, bary, s, xi)| {
            let t = mesh.element(*e);
            let x = crate::quadrature::bary_to_point(&t, bary);
            let d = dist.eval_in(*e, x);
            let fl = floor.eval_bary(*e, bary);
            let fv = reactions.f_eps(fl, *s);
            let fb = (constants.lf + constants.sigma) * s.abs().powf(q) + constants.big_c * d.powf(-constants.gamma);
            let gv = reactions.g_eps(xi);
            let gb = (constants.lg + constants.sigma) * norm(xi).powf(q) + constants.big_c_prime;
            (fv - fb, x, *s, gv - gb)
        })
        .collect();
    let mut report = GrowthReport {
        samples,
        f_max_violation: f64::NEG_INFINITY,
        g_max_violation: f64::NEG_INFINITY,
        worst_f: ([0.0, 0.0], 0.0),
        worst_g: vec![0.0; n],
    };
    for ((fv, x, s, gv), case) in results.into_iter().zip(&cases) {
        if fv > report.f_max_violation {
            report.f_max_violation = fv;
            report.worst_f = (x, s);
        }
        if gv > report.g_max_violation {
            report.g_max_violation = gv;
            report.worst_g = case.3.clone();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::mesh_fem::{build_mesh, distance_field, unit_square, FemSpace};
    use crate::problem_def::{Piece1d, Piecewise1d};

    fn space(h: f64) -> Arc<FemSpace> {
        FemSpace::new(Arc::new(build_mesh(&unit_square(), h).unwrap())).unwrap()
    }

    fn bump_floor(space: &Arc<FemSpace>, k: f64) -> DiscreteField {
        use std::f64::consts::PI;
        DiscreteField::interpolate(space, |x| k * (PI * x[0]).sin() * (PI * x[1]).sin())
    }

    fn step_g(a: f64, b: f64) -> NonlinearitySpec {
        let g1 = Piecewise1d::new(
            vec![
                Piece1d { lo: f64::NEG_INFINITY, hi: 0.0, expr: Expr::constant(a) },
                Piece1d { lo: 0.0, hi: f64::INFINITY, expr: Expr::constant(b) },
            ],
            f64::NEG_INFINITY,
        )
        .unwrap();
        let g2 = Piecewise1d::single(Expr::constant(1.0), f64::NEG_INFINITY);
        NonlinearitySpec::product(vec![g1, g2], vec![]).unwrap()
    }

    #[test]
    fn mollifier_mass_and_support() {
        let (rho, _) = make_mollifiers(0.5, 2).unwrap();
        assert!((rho.mass() - 1.0).abs() < 1e-12);
        assert_eq!(rho.density1(0.5), 0.0);
        assert_eq!(rho.density1(-0.7), 0.0);
        assert!(rho.density1(0.49) > 0.0);
        let (_, eta) = make_mollifiers(0.25, 2).unwrap();
        assert!((eta.mass() - 1.0).abs() < 1e-11, "{}", eta.mass());
        assert_eq!(eta.kind(), MollifierKind::Vector);
        assert!(matches!(make_mollifiers(1.0, 2), Err(Error::Argument(_))));
        assert!(matches!(make_mollifiers(0.0, 2), Err(Error::Argument(_))));
    }

    #[test]
    fn truncation_examples() {
        let sp = space(0.25);
        let floor = bump_floor(&sp, 0.25);
        let f = NonlinearitySpec::scalar_expr("s^(-0.5)", Some(0.5)).unwrap();
        let tf = truncate_f(&f, &floor).unwrap();
        assert_eq!(tf.eval_with_floor(0.25, 0.04), 2.0);
        assert_eq!(tf.eval_with_floor(0.25, 1.0), 1.0);
        // (0.5, 0.5) is a mesh vertex where ū = 0.25
        assert!((tf.eval([0.5, 0.5], 0.04).unwrap() - 2.0).abs() < 1e-12);
        let bad = DiscreteField::zeros(&sp);
        assert!(matches!(truncate_f(&f, &bad), Err(Error::Precondition(_))));
    }

    #[test]
    fn constant_reactions_are_preserved() {
        let sp = space(0.25);
        let floor = bump_floor(&sp, 0.1);
        let f = NonlinearitySpec::scalar_expr("3", None).unwrap();
        let tf = truncate_f(&f, &floor).unwrap();
        let (rho, eta) = make_mollifiers(0.3, 2).unwrap();
        for s in [-1.0, 0.0, 0.05, 2.0] {
            assert!((f_eps_with_floor(&tf, &rho, 0.1, s) - 3.0).abs() < 1e-14);
        }
        let g = NonlinearitySpec::vector_expr(2, "1.5").unwrap();
        assert!((eval_g_eps(&g, &eta, &[0.3, -2.0]) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn step_is_averaged_at_the_jump() {
        let g = step_g(0.5, 0.75);
        let (_, eta) = make_mollifiers(0.2, 2).unwrap();
        assert!((eval_g_eps(&g, &eta, &[0.0, 0.7]) - 0.625).abs() < 1e-8);
        // away from the jump the value is untouched
        assert!((eval_g_eps(&g, &eta, &[0.5, 0.0]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn monotone_f_is_bracketed() {
        let sp = space(0.25);
        let floor = bump_floor(&sp, 0.1);
        let f = NonlinearitySpec::scalar_expr("s^2", None).unwrap();
        let tf = truncate_f(&f, &floor).unwrap();
        let (rho, _) = make_mollifiers(0.2, 2).unwrap();
        for s in [0.0, 0.3, 1.0] {
            let v = f_eps_with_floor(&tf, &rho, 0.1, s);
            assert!(v >= tf.eval_with_floor(0.1, s - 0.2) && v <= tf.eval_with_floor(0.1, s + 0.2));
        }
    }

    #[test]
    fn truncate_then_mollify_is_finite_below_zero() {
        let sp = space(0.25);
        let floor = bump_floor(&sp, 0.1);
        let f = NonlinearitySpec::scalar_expr("s^(-0.5)", Some(0.5)).unwrap();
        let tf = truncate_f(&f, &floor).unwrap();
        let (rho, _) = make_mollifiers(0.2, 2).unwrap();
        let v = f_eps_with_floor(&tf, &rho, 0.1, -0.1);
        assert!(v.is_finite() && (v - 0.1f64.powf(-0.5)).abs() < 1e-12);
        // the swapped order convolves f over s ≤ 0 first
        let swapped: f64 = rho.rule().mapped(-0.3, 0.1).map(|(t, w)| w * rho.density1(-0.1 - t) * f.eval_scalar(t)).sum();
        assert!(swapped.is_nan());
    }

    #[test]
    fn regularized_values_converge_at_continuity_points() {
        let sp = space(0.25);
        let floor = bump_floor(&sp, 0.05);
        let f = NonlinearitySpec::scalar_expr("s^(-0.5) + s", Some(0.5)).unwrap();
        let tf = truncate_f(&f, &floor).unwrap();
        let g = NonlinearitySpec::vector_expr(2, "1 + (xi1^2 + xi2^2)^0.5").unwrap();
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for k in 0..5 {
            let eps = 0.4 * 0.5f64.powi(k);
            let (rho, eta) = make_mollifiers(eps, 2).unwrap();
            let ef = (f_eps_with_floor(&tf, &rho, 0.05, 0.7) - tf.eval_with_floor(0.05, 0.7)).abs();
            let eg = (eval_g_eps(&g, &eta, &[0.3, 0.4]) - 1.5).abs();
            assert!(ef < prev.0 && eg < prev.1);
            prev = (ef, eg);
        }
    }

    #[test]
    fn shift_constant_matches_sampling() {
        for &(a, b, q) in &[(0.3, 0.4, 0.5), (1.0, 1.5, 1.0), (1.0, 1.2, 2.0)] {
            let sampled = (0..200_000)
                .map(|k| {
                    let t = k as f64 * 1e-3;
                    a * (t + 1.0f64).powf(q) - b * t.powf(q)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let c = shift_constant(a, b, q);
            assert!(c >= sampled - 1e-9 && c <= sampled + 1e-6, "{a} {b} {q}: {c} vs {sampled}");
        }
    }

    #[test]
    fn zero_reactions_have_no_violation() {
        let sp = space(0.25);
        let floor = bump_floor(&sp, 0.1);
        let dist = distance_field(sp.mesh());
        let f = NonlinearitySpec::scalar_expr("0", None).unwrap();
        let g = NonlinearitySpec::vector_expr(2, "0").unwrap();
        let c = compute_growth_constants(&f, &g, &floor, &dist, 0.0, 0.0, 0.1, 1.5, 0.5).unwrap();
        let r = RegularizedReactions::new(truncate_f(&f, &floor).unwrap(), g, 0.1).unwrap();
        let rep = growth_bounds_check(&r, &dist, &c, 500, 1).unwrap();
        assert!(rep.max_violation() <= 0.0);
    }

    #[test]
    fn halved_constant_is_detected() {
        let sp = space(0.125);
        // pyramid floor keeps ū/d bounded below, so the bound is nearly tight
        let floor = DiscreteField::interpolate(&sp, |x| 0.05 * x[0].min(1.0 - x[0]).min(x[1]).min(1.0 - x[1]));
        let dist = distance_field(sp.mesh());
        let f = NonlinearitySpec::scalar_expr("s^(-0.5)", Some(0.5)).unwrap();
        let g = NonlinearitySpec::vector_expr(2, "0.5").unwrap();
        let c = compute_growth_constants(&f, &g, &floor, &dist, 0.0, 0.0, 0.5, 1.5, 0.5).unwrap();
        let r = RegularizedReactions::new(truncate_f(&f, &floor).unwrap(), g, 0.1).unwrap();
        let ok = growth_bounds_check(&r, &dist, &c, 2000, 3).unwrap();
        assert!(ok.max_violation() <= 1e-9, "{ok:?}");
        let mut small = c.clone();
        small.big_c *= 0.5;
        let bad = growth_bounds_check(&r, &dist, &small, 2000, 3).unwrap();
        assert!(bad.f_max_violation > 0.0 && bad.g_max_violation <= 1e-9);
        let mut small = c.clone();
        small.big_c_prime *= 0.5;
        assert!(growth_bounds_check(&r, &dist, &small, 2000, 3).unwrap().g_max_violation > 0.0);
    }
}
