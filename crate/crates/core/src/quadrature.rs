//! Quadrature rules: Gauss–Legendre on intervals and a degree-5 rule on
//! triangles.

use std::sync::OnceLock;

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "need at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Integrates `f` over `[a, b]`.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }

    /// Nodes and weights mapped to `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, w * half))
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let p = if n == 0 { 1.0 } else { p1 };
    let dp = n as f64 * (x * p - p0) / (x * x - 1.0);
    (p, dp)
}

/// Cached Gauss–Legendre rules for the sizes used internally.
pub fn gauss_legendre(n: usize) -> &'static GaussLegendre {
    static RULES: OnceLock<Vec<GaussLegendre>> = OnceLock::new();
    let rules = RULES.get_or_init(|| (1..=64).map(GaussLegendre::new).collect());
    &rules[n - 1]
}

/// A quadrature rule on the reference triangle in barycentric form; weights
/// sum to one (multiply by the triangle area).
#[derive(Debug, Clone, Copy)]
pub struct TriangleRule {
    pub points: &'static [[f64; 3]],
    pub weights: &'static [f64],
}

/// Seven-point rule, exact for polynomials of degree five.
pub fn dunavant7() -> TriangleRule {
    static RULE: OnceLock<(Vec<[f64; 3]>, Vec<f64>)> = OnceLock::new();
    let (p, w) = RULE.get_or_init(|| {
        let r15 = 15f64.sqrt();
        let a1 = (6.0 - r15) / 21.0;
        let b1 = (9.0 + 2.0 * r15) / 21.0;
        let a2 = (6.0 + r15) / 21.0;
        let b2 = (9.0 - 2.0 * r15) / 21.0;
        let w1 = (155.0 - r15) / 1200.0;
        let w2 = (155.0 + r15) / 1200.0;
        let third = 1.0 / 3.0;
        let pts = vec![
            [third, third, third],
            [b1, a1, a1],
            [a1, b1, a1],
            [a1, a1, b1],
            [b2, a2, a2],
            [a2, b2, a2],
            [a2, a2, b2],
        ];
        let wts = vec![0.225, w1, w1, w1, w2, w2, w2];
        (pts, wts)
    });
    TriangleRule {
        points: p.as_slice(),
        weights: w.as_slice(),
    }
}

/// Maps barycentric coordinates to a Cartesian point.
#[inline]
pub fn bary_to_point(v: &[[f64; 2]; 3], b: &[f64; 3]) -> [f64; 2] {
    [
        b[0] * v[0][0] + b[1] * v[1][0] + b[2] * v[2][0],
        b[0] * v[0][1] + b[1] * v[1][1] + b[2] * v[2][1],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_exactness() {
        for n in [1, 2, 5, 16, 32] {
            let rule = GaussLegendre::new(n);
            assert!((rule.weights.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            // exact for degree 2n-1
            let deg = 2 * n - 1;
            let exact = if deg % 2 == 1 { 2.0 / (deg as f64) } else { 0.0 };
            let got = rule.integrate(-1.0, 1.0, |x| x.powi(deg as i32 - 1));
            assert!((got - exact).abs() < 1e-12, "n={n}: {got} vs {exact}");
        }
        let r = gauss_legendre(8);
        let v = r.integrate(0.0, std::f64::consts::PI, f64::sin);
        assert!((v - 2.0).abs() < 1e-10);
    }

    #[test]
    fn dunavant_is_degree_five() {
        let rule = dunavant7();
        let v = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        // ∫_T x^a y^b = a! b! / (a+b+2)!
        let fact = |n: u32| (1..=n).map(f64::from).product::<f64>();
        for a in 0..=5u32 {
            for b in 0..=(5 - a) {
                let exact = fact(a) * fact(b) / fact(a + b + 2);
                let got: f64 = rule
                    .points
                    .iter()
                    .zip(rule.weights)
                    .map(|(bc, w)| {
                        let p = bary_to_point(&v, bc);
                        w * 0.5 * p[0].powi(a as i32) * p[1].powi(b as i32)
                    })
                    .sum();
                assert!((got - exact).abs() < 1e-15, "x^{a} y^{b}");
            }
        }
    }
}
