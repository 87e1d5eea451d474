use std::fmt;
use std::sync::{Arc, OnceLock};

use rayon::prelude::*;

use super::mesh::{Mesh, Point};
use crate::error::{Error, Result};
use crate::linalg::{EnvelopeCholesky, EnvelopeLayout, SparsePattern, SymMatrix};
use crate::quadrature::{bary_to_point, dunavant7};

const NO_DOF: usize = usize::MAX;

/// P1 Lagrange space with homogeneous Dirichlet conditions on a mesh.
pub struct FemSpace {
    mesh: Arc<Mesh>,
    grads: Vec<[[f64; 2]; 3]>,
    areas: Vec<f64>,
    dof_of: Vec<usize>,
    interior: Vec<usize>,
    pattern: SparsePattern,
    layout: Arc<EnvelopeLayout>,
    // offsets of the local 3x3 block in the global value array
    elem_offsets: Vec<[usize; 9]>,
    lumped: Vec<f64>,
    laplace: OnceLock<EnvelopeCholesky>,
}

impl fmt::Debug for FemSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FemSpace")
            .field("vertices", &self.mesh.n_vertices())
            .field("triangles", &self.mesh.n_triangles())
            .field("dofs", &self.interior.len())
            .finish()
    }
}

impl FemSpace {
    pub fn new(mesh: Arc<Mesh>) -> Result<Arc<FemSpace>> {
        let nv = mesh.n_vertices();
        let mut dof_of = vec![NO_DOF; nv];
        let mut interior = Vec::new();
        for v in 0..nv {
            if !mesh.is_boundary(v) {
                dof_of[v] = interior.len();
                interior.push(v);
            }
        }
        if interior.is_empty() {
            return Err(Error::Geometry("mesh has no interior vertices".into()));
        }
        let mut grads = Vec::with_capacity(mesh.n_triangles());
        let mut areas = Vec::with_capacity(mesh.n_triangles());
        for e in 0..mesh.n_triangles() {
            let t = mesh.element(e);
            let area = mesh.area(e);
            let mut g = [[0.0; 2]; 3];
            for k in 0..3 {
                let (b, c) = (t[(k + 1) % 3], t[(k + 2) % 3]);
                g[k] = [(b[1] - c[1]) / (2.0 * area), (c[0] - b[0]) / (2.0 * area)];
            }
            grads.push(g);
            areas.push(area);
        }
        let mut edges = Vec::new();
        for tri in mesh.triangles() {
            for a in 0..3 {
                for b in a + 1..3 {
                    let (i, j) = (dof_of[tri[a]], dof_of[tri[b]]);
                    if i != NO_DOF && j != NO_DOF {
                        edges.push((i, j));
                    }
                }
            }
        }
        let pattern = SparsePattern::from_edges(interior.len(), edges);
        let layout = Arc::new(EnvelopeLayout::new(&pattern));
        let elem_offsets = mesh
            .triangles()
            .iter()
            .map(|tri| {
                let mut off = [NO_DOF; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        let (i, j) = (dof_of[tri[a]], dof_of[tri[b]]);
                        if i != NO_DOF && j != NO_DOF {
                            off[3 * a + b] = pattern.offset(i, j).expect("pattern entry");
                        }
                    }
                }
                off
            })
            .collect();
        let mut lumped = vec![0.0; interior.len()];
        for (e, tri) in mesh.triangles().iter().enumerate() {
            for &v in tri {
                if dof_of[v] != NO_DOF {
                    lumped[dof_of[v]] += areas[e] / 3.0;
                }
            }
        }
        Ok(Arc::new(FemSpace {
            mesh,
            grads,
            areas,
            dof_of,
            interior,
            pattern,
            layout,
            elem_offsets,
            lumped,
            laplace: OnceLock::new(),
        }))
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    /// Number of interior (free) vertices.
    pub fn n_dofs(&self) -> usize {
        self.interior.len()
    }

    /// Interior vertex of each degree of freedom.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn dof(&self, vertex: usize) -> Option<usize> {
        let d = self.dof_of[vertex];
        (d != NO_DOF).then_some(d)
    }

    pub fn area(&self, e: usize) -> f64 {
        self.areas[e]
    }

    /// Gradients of the three local hat functions of element `e`.
    pub fn hat_gradients(&self, e: usize) -> &[[f64; 2]; 3] {
        &self.grads[e]
    }

    pub fn pattern(&self) -> &SparsePattern {
        &self.pattern
    }

    /// Lumped mass `∫ψ_i` per degree of freedom.
    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped
    }

    /// Gradient on element `e` of the field with nodal values `values`.
    #[inline]
    pub fn gradient(&self, e: usize, values: &[f64]) -> [f64; 2] {
        let t = &self.mesh.triangles()[e];
        let g = &self.grads[e];
        let mut out = [0.0; 2];
        for k in 0..3 {
            out[0] += values[t[k]] * g[k][0];
            out[1] += values[t[k]] * g[k][1];
        }
        out
    }

    /// Stiffness matrix `Σ_e w_e ∫_e ∇ψ_i·∇ψ_j` on the interior dofs.
    pub fn weighted_stiffness(&self, weights: &[f64]) -> SymMatrix<'_> {
        let tensors: Vec<[[f64; 2]; 2]> =
            weights.iter().map(|&w| [[w, 0.0], [0.0, w]]).collect();
        self.tensor_stiffness(&tensors)
    }

    /// Stiffness matrix with a symmetric 2×2 coefficient per element.
    pub fn tensor_stiffness(&self, tensors: &[[[f64; 2]; 2]]) -> SymMatrix<'_> {
        let locals: Vec<[f64; 9]> = (0..self.mesh.n_triangles())
            .into_par_iter()
            .map(|e| {
                let g = &self.grads[e];
                let c = &tensors[e];
                let mut k = [0.0; 9];
                for a in 0..3 {
                    let cg = [
                        c[0][0] * g[a][0] + c[0][1] * g[a][1],
                        c[1][0] * g[a][0] + c[1][1] * g[a][1],
                    ];
                    for b in 0..3 {
                        k[3 * a + b] = self.areas[e] * (cg[0] * g[b][0] + cg[1] * g[b][1]);
                    }
                }
                k
            })
            .collect();
        let mut m = SymMatrix::zeros(&self.pattern);
        for (e, k) in locals.iter().enumerate() {
            for (slot, &off) in self.elem_offsets[e].iter().enumerate() {
                if off != NO_DOF {
                    m.values[off] += k[slot];
                }
            }
        }
        m
    }

    /// Scatters per-element local vectors (one entry per local vertex) into
    /// an interior dual vector.
    pub fn scatter(&self, locals: &[[f64; 3]]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_dofs()];
        for (tri, loc) in self.mesh.triangles().iter().zip(locals) {
            for k in 0..3 {
                if let Some(d) = self.dof(tri[k]) {
                    out[d] += loc[k];
                }
            }
        }
        out
    }

    /// Load vector `∫ f ψ_i` with the seven-point rule; `f(e, q, x)`
    /// receives the element, the quadrature index and the point.
    pub fn load<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(usize, usize, Point) -> f64 + Sync,
    {
        let rule = dunavant7();
        let locals: Vec<[f64; 3]> = (0..self.mesh.n_triangles())
            .into_par_iter()
            .map(|e| {
                let t = self.mesh.element(e);
                let mut loc = [0.0; 3];
                for (q, (b, w)) in rule.points.iter().zip(rule.weights).enumerate() {
                    let v = f(e, q, bary_to_point(&t, b)) * w * self.areas[e];
                    for k in 0..3 {
                        loc[k] += v * b[k];
                    }
                }
                loc
            })
            .collect();
        self.scatter(&locals)
    }

    /// Quadrature points of every element, in the order used by [`load`](Self::load).
    pub fn quadrature_points(&self) -> Vec<[Point; 7]> {
        let rule = dunavant7();
        (0..self.mesh.n_triangles())
            .map(|e| {
                let t = self.mesh.element(e);
                std::array::from_fn(|q| bary_to_point(&t, &rule.points[q]))
            })
            .collect()
    }

    /// Factors an assembled interior matrix.
    pub fn factor(&self, m: &SymMatrix<'_>) -> Result<EnvelopeCholesky> {
        EnvelopeCholesky::factor(&self.layout, m)
    }

    fn laplace_factor(&self) -> &EnvelopeCholesky {
        self.laplace.get_or_init(|| {
            let k = self.weighted_stiffness(&vec![1.0; self.mesh.n_triangles()]);
            self.factor(&k).expect("Laplace stiffness is positive definite")
        })
    }

    /// Solves `K₀ x = r` with the Dirichlet Laplace stiffness `K₀`.
    pub fn laplace_solve(&self, r: &[f64]) -> Vec<f64> {
        self.laplace_factor().solve(r)
    }

    /// `H⁻¹`-type norm `sqrt(rᵀ K₀⁻¹ r)` of a dual vector.
    pub fn dual_norm(&self, r: &[f64]) -> f64 {
        let x = self.laplace_solve(r);
        x.iter().zip(r).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    }
}

/// Nodal P1 field over a [`FemSpace`].
#[derive(Clone)]
pub struct DiscreteField {
    space: Arc<FemSpace>,
    values: Vec<f64>,
}

impl fmt::Debug for DiscreteField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiscreteField")
            .field("vertices", &self.values.len())
            .field("sup", &self.sup_norm())
            .finish()
    }
}

impl DiscreteField {
    pub fn new(space: Arc<FemSpace>, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.mesh.n_vertices() {
            return Err(Error::Type(format!(
                "field has {} values for {} vertices",
                values.len(),
                space.mesh.n_vertices()
            )));
        }
        Ok(DiscreteField { space, values })
    }

    pub fn zeros(space: &Arc<FemSpace>) -> Self {
        DiscreteField {
            values: vec![0.0; space.mesh.n_vertices()],
            space: Arc::clone(space),
        }
    }

    /// Nodal interpolant of `f`; boundary values are kept as given by `f`.
    pub fn interpolate(space: &Arc<FemSpace>, f: impl Fn(Point) -> f64) -> Self {
        DiscreteField {
            values: space.mesh.vertices().iter().map(|&p| f(p)).collect(),
            space: Arc::clone(space),
        }
    }

    /// Field with the given interior values and zero boundary values.
    pub fn from_interior(space: &Arc<FemSpace>, x: &[f64]) -> Self {
        let mut values = vec![0.0; space.mesh.n_vertices()];
        for (d, &v) in space.interior.iter().enumerate() {
            values[v] = x[d];
        }
        DiscreteField {
            values,
            space: Arc::clone(space),
        }
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn interior_values(&self) -> Vec<f64> {
        self.space.interior.iter().map(|&v| self.values[v]).collect()
    }

    pub fn same_space(&self, other: &DiscreteField) -> bool {
        Arc::ptr_eq(&self.space, &other.space)
    }

    pub(crate) fn check_space(&self, other: &DiscreteField) -> Result<()> {
        if self.same_space(other) {
            Ok(())
        } else {
            Err(Error::Type("fields live on different spaces".into()))
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        DiscreteField {
            values: self.values.iter().map(|v| c * v).collect(),
            space: Arc::clone(&self.space),
        }
    }

    pub fn gradient(&self, e: usize) -> [f64; 2] {
        self.space.gradient(e, &self.values)
    }

    pub fn gradients(&self) -> Vec<[f64; 2]> {
        (0..self.space.mesh.n_triangles())
            .map(|e| self.gradient(e))
            .collect()
    }

    /// Value at barycentric coordinates `b` of element `e`.
    #[inline]
    pub fn eval_bary(&self, e: usize, b: &[f64; 3]) -> f64 {
        let t = &self.space.mesh.triangles()[e];
        b[0] * self.values[t[0]] + b[1] * self.values[t[1]] + b[2] * self.values[t[2]]
    }

    /// Values at the seven quadrature points of every element.
    pub fn quadrature_values(&self) -> Vec<[f64; 7]> {
        let rule = dunavant7();
        (0..self.space.mesh.n_triangles())
            .map(|e| std::array::from_fn(|q| self.eval_bary(e, &rule.points[q])))
            .collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn grad_sup_norm(&self) -> f64 {
        (0..self.space.mesh.n_triangles())
            .map(|e| {
                let g = self.gradient(e);
                g[0].hypot(g[1])
            })
            .fold(0.0, f64::max)
    }

    /// `‖u‖_p` with the seven-point rule.
    pub fn lp_norm(&self, p: f64) -> f64 {
        let rule = dunavant7();
        let sum: f64 = (0..self.space.mesh.n_triangles())
            .map(|e| {
                rule.points
                    .iter()
                    .zip(rule.weights)
                    .map(|(b, w)| w * self.eval_bary(e, b).abs().powf(p))
                    .sum::<f64>()
                    * self.space.areas[e]
            })
            .sum();
        sum.powf(1.0 / p)
    }

    /// `‖∇u‖_p` (exact for P1).
    pub fn grad_lp_norm(&self, p: f64) -> f64 {
        let sum: f64 = (0..self.space.mesh.n_triangles())
            .map(|e| {
                let g = self.gradient(e);
                self.space.areas[e] * g[0].hypot(g[1]).powf(p)
            })
            .sum();
        sum.powf(1.0 / p)
    }

    /// `‖u − f‖_2` with the seven-point rule.
    pub fn l2_error(&self, f: impl Fn(Point) -> f64) -> f64 {
        let rule = dunavant7();
        let mesh = &self.space.mesh;
        let sum: f64 = (0..mesh.n_triangles())
            .map(|e| {
                let t = mesh.element(e);
                rule.points
                    .iter()
                    .zip(rule.weights)
                    .map(|(b, w)| {
                        let d = self.eval_bary(e, b) - f(bary_to_point(&t, b));
                        w * d * d
                    })
                    .sum::<f64>()
                    * self.space.areas[e]
            })
            .sum();
        sum.sqrt()
    }

    /// Area-weighted average of element gradients around each vertex.
    pub fn vertex_gradients(&self) -> Vec<[f64; 2]> {
        let mesh = &self.space.mesh;
        let mut acc = vec![[0.0; 3]; mesh.n_vertices()];
        for (e, tri) in mesh.triangles().iter().enumerate() {
            let g = self.gradient(e);
            let a = self.space.areas[e];
            for &v in tri {
                acc[v][0] += a * g[0];
                acc[v][1] += a * g[1];
                acc[v][2] += a;
            }
        }
        acc.iter().map(|s| [s[0] / s[2], s[1] / s[2]]).collect()
    }

    /// Pointwise difference `self − other`.
    pub fn minus(&self, other: &DiscreteField) -> Result<DiscreteField> {
        self.check_space(other)?;
        Ok(DiscreteField {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
            space: Arc::clone(&self.space),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::{build_mesh, unit_square};

    fn space(h: f64) -> Arc<FemSpace> {
        FemSpace::new(Arc::new(build_mesh(&unit_square(), h).unwrap())).unwrap()
    }

    #[test]
    fn gradients_of_linear_field_are_exact() {
        let s = space(0.2);
        let u = DiscreteField::interpolate(&s, |p| 2.0 * p[0] - 3.0 * p[1] + 1.0);
        for e in 0..s.mesh().n_triangles() {
            let g = u.gradient(e);
            assert!((g[0] - 2.0).abs() < 1e-12 && (g[1] + 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quadratics_integrate_exactly() {
        // ∫_{[0,1]²} (x² + xy + 3) = 1/3 + 1/4 + 3
        let s = space(0.3);
        let one = s.mesh().n_triangles();
        let rule = dunavant7();
        let mut total = 0.0;
        for e in 0..one {
            let t = s.mesh().element(e);
            for (b, w) in rule.points.iter().zip(rule.weights) {
                let p = bary_to_point(&t, b);
                total += w * s.area(e) * (p[0] * p[0] + p[0] * p[1] + 3.0);
            }
        }
        assert!((total - (1.0 / 3.0 + 0.25 + 3.0)).abs() < 1e-13);
    }

    #[test]
    fn lumped_mass_and_load_agree_on_constants() {
        let s = space(0.25);
        let l = s.load(|_, _, _| 1.0);
        for (a, b) in l.iter().zip(s.lumped_mass()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn dual_norm_of_stiffness_image_is_energy_norm() {
        let s = space(0.25);
        let k = s.weighted_stiffness(&vec![1.0; s.mesh().n_triangles()]);
        let x: Vec<f64> = (0..s.n_dofs()).map(|i| (i as f64 * 0.37).sin()).collect();
        let r = k.mul_vec(&x);
        let energy: f64 = x.iter().zip(&r).map(|(a, b)| a * b).sum();
        assert!((s.dual_norm(&r) - energy.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn field_length_is_checked() {
        let s = space(0.5);
        assert!(matches!(DiscreteField::new(s, vec![0.0; 3]), Err(Error::Type(_))));
    }
}
