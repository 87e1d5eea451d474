use rayon::prelude::*;

use super::mesh::{dist, point_segment_distance, Mesh, Point};

/// Exact distance to the boundary of the meshed polygon.
#[derive(Debug, Clone)]
pub struct DistanceField {
    edges: Vec<[Point; 2]>,
    nodal: Vec<f64>,
    // per element: the boundary edges that can realise the minimum inside it
    candidates: Vec<Vec<u32>>,
}

/// Builds the distance field from the boundary edges of `mesh`.
pub fn distance_field(mesh: &Mesh) -> DistanceField {
    let edges: Vec<[Point; 2]> = mesh
        .boundary_edges()
        .iter()
        .map(|&[a, b]| [mesh.vertices()[a], mesh.vertices()[b]])
        .collect();
    let global = |p: Point| {
        edges
            .iter()
            .map(|e| point_segment_distance(p, e[0], e[1]))
            .fold(f64::INFINITY, f64::min)
    };
    let nodal: Vec<f64> = (0..mesh.n_vertices())
        .into_par_iter()
        .map(|v| if mesh.is_boundary(v) { 0.0 } else { global(mesh.vertices()[v]) })
        .collect();
    let candidates = (0..mesh.n_triangles())
        .into_par_iter()
        .map(|e| {
            let t = mesh.element(e);
            let c = [(t[0][0] + t[1][0] + t[2][0]) / 3.0, (t[0][1] + t[1][1] + t[2][1]) / 3.0];
            let radius = t.iter().map(|&v| dist(v, c)).fold(0.0, f64::max);
            // distance to a segment is convex, so its maximum over the
            // element sits at a vertex
            let upper = edges
                .iter()
                .map(|s| {
                    t.iter()
                        .map(|&v| point_segment_distance(v, s[0], s[1]))
                        .fold(0.0, f64::max)
                })
                .fold(f64::INFINITY, f64::min);
            edges
                .iter()
                .enumerate()
                .filter(|(_, s)| point_segment_distance(c, s[0], s[1]) - radius <= upper * (1.0 + 1e-12))
                .map(|(k, _)| k as u32)
                .collect()
        })
        .collect();
    DistanceField {
        edges,
        nodal,
        candidates,
    }
}

impl DistanceField {
    /// Distance at an arbitrary point (assumed inside the domain).
    pub fn eval(&self, p: Point) -> f64 {
        self.edges
            .iter()
            .map(|e| point_segment_distance(p, e[0], e[1]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance at a point known to lie in element `e`.
    #[inline]
    pub fn eval_in(&self, e: usize, p: Point) -> f64 {
        self.candidates[e]
            .iter()
            .map(|&k| {
                let s = &self.edges[k as usize];
                point_segment_distance(p, s[0], s[1])
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn nodal(&self) -> &[f64] {
        &self.nodal
    }

    /// Diameter of the domain (largest distance between boundary points).
    pub fn domain_diameter(&self) -> f64 {
        let mut m: f64 = 0.0;
        for a in &self.edges {
            for b in &self.edges {
                for p in a {
                    for q in b {
                        m = m.max(dist(*p, *q));
                    }
                }
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::{build_mesh, unit_square};
    use crate::quadrature::{bary_to_point, dunavant7};

    #[test]
    fn square_values() {
        let m = build_mesh(&unit_square(), 0.1).unwrap();
        let d = distance_field(&m);
        assert!((d.eval([0.5, 0.5]) - 0.5).abs() < 1e-15);
        assert!((d.eval([0.1, 0.3]) - 0.1).abs() < 1e-15);
        for v in m.boundary_vertices() {
            assert_eq!(d.nodal()[v], 0.0);
        }
        for v in 0..m.n_vertices() {
            if !m.is_boundary(v) {
                assert!(d.nodal()[v] > 0.0);
            }
        }
        assert!((d.domain_diameter() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn local_evaluation_matches_global_on_l_shape() {
        let l = [[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]];
        let m = build_mesh(&l, 0.2).unwrap();
        let d = distance_field(&m);
        let rule = dunavant7();
        for e in 0..m.n_triangles() {
            let t = m.element(e);
            for b in rule.points {
                let p = bary_to_point(&t, b);
                assert_eq!(d.eval_in(e, p), d.eval(p));
            }
        }
    }
}
