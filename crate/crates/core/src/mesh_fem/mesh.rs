use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Largest admissible angle before a triangle counts as obtuse.
const RIGHT_ANGLE_SLACK: f64 = 1e-9;

/// A conforming triangulation of a polygon.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    on_boundary: Vec<bool>,
    h: f64,
    degraded: bool,
}

impl Mesh {
    /// Assembles a mesh from raw parts. Triangles are reoriented
    /// counter-clockwise; degenerate triangles are rejected.
    pub fn from_parts(
        vertices: Vec<Point>,
        mut triangles: Vec<[usize; 3]>,
        boundary: &[usize],
    ) -> Result<Mesh> {
        let nv = vertices.len();
        if vertices.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::Geometry("non-finite vertex coordinate".into()));
        }
        for (e, t) in triangles.iter_mut().enumerate() {
            if t.iter().any(|&i| i >= nv) {
                return Err(Error::Geometry(format!("triangle {e} references a missing vertex")));
            }
            let a = signed_area(&[vertices[t[0]], vertices[t[1]], vertices[t[2]]]);
            if a == 0.0 || !a.is_finite() {
                return Err(Error::Geometry(format!("triangle {e} is degenerate")));
            }
            if a < 0.0 {
                t.swap(1, 2);
            }
        }
        let mut on_boundary = vec![false; nv];
        for &b in boundary {
            if b >= nv {
                return Err(Error::Geometry(format!("boundary index {b} out of range")));
            }
            on_boundary[b] = true;
        }
        let mut mesh = Mesh {
            vertices,
            triangles,
            on_boundary,
            h: 0.0,
            degraded: false,
        };
        mesh.h = (0..mesh.n_triangles())
            .map(|e| diameter(&mesh.element(e)))
            .fold(0.0, f64::max);
        mesh.degraded = (0..mesh.n_triangles()).any(|e| max_angle(&mesh.element(e)) > 0.5 * std::f64::consts::PI + RIGHT_ANGLE_SLACK);
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn is_boundary(&self, v: usize) -> bool {
        self.on_boundary[v]
    }

    pub fn boundary_vertices(&self) -> Vec<usize> {
        (0..self.n_vertices()).filter(|&v| self.on_boundary[v]).collect()
    }

    /// Maximum element diameter.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// True when some triangle has an angle above 90°.
    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn element(&self, e: usize) -> [Point; 3] {
        let t = self.triangles[e];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    pub fn area(&self, e: usize) -> f64 {
        signed_area(&self.element(e))
    }

    /// Element containing `p` and the barycentric coordinates of `p` in it
    /// (linear search).
    pub fn locate(&self, p: Point) -> Option<(usize, [f64; 3])> {
        (0..self.n_triangles()).find_map(|e| {
            let t = self.element(e);
            let a = signed_area(&t);
            let b = [
                signed_area(&[p, t[1], t[2]]) / a,
                signed_area(&[t[0], p, t[2]]) / a,
                signed_area(&[t[0], t[1], p]) / a,
            ];
            b.iter().all(|&c| c >= -1e-12).then_some((e, b))
        })
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_triangles()).map(|e| self.area(e)).sum()
    }

    /// Largest angle over all triangles, in radians.
    pub fn max_angle(&self) -> f64 {
        (0..self.n_triangles())
            .map(|e| max_angle(&self.element(e)))
            .fold(0.0, f64::max)
    }

    /// Edges with exactly one incident triangle.
    pub fn boundary_edges(&self) -> Vec<[usize; 2]> {
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut edges: Vec<[usize; 2]> = count
            .into_iter()
            .filter(|&(_, c)| c == 1)
            .map(|((a, b), _)| [a, b])
            .collect();
        edges.sort_unstable();
        edges
    }
}

pub(crate) fn signed_area(t: &[Point; 3]) -> f64 {
    0.5 * ((t[1][0] - t[0][0]) * (t[2][1] - t[0][1]) - (t[2][0] - t[0][0]) * (t[1][1] - t[0][1]))
}

pub(crate) fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub(crate) fn diameter(t: &[Point; 3]) -> f64 {
    dist(t[0], t[1]).max(dist(t[1], t[2])).max(dist(t[2], t[0]))
}

fn max_angle(t: &[Point; 3]) -> f64 {
    (0..3)
        .map(|k| {
            let (a, b, c) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
            let u = [b[0] - a[0], b[1] - a[1]];
            let v = [c[0] - a[0], c[1] - a[1]];
            let cos = (u[0] * v[0] + u[1] * v[1]) / (u[0].hypot(u[1]) * v[0].hypot(v[1]));
            cos.clamp(-1.0, 1.0).acos()
        })
        .fold(0.0, f64::max)
}

/// Distance from `p` to the segment `[a, b]`.
pub(crate) fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * d[0]).hypot(p[1] - a[1] - t * d[1])
}

fn point_in_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// Validates a simple polygon and returns it counter-clockwise without a
/// repeated closing vertex.
pub fn normalize_polygon(polygon: &[Point]) -> Result<Vec<Point>> {
    let mut poly: Vec<Point> = polygon.to_vec();
    if poly.len() > 1 && poly.first() == poly.last() {
        poly.pop();
    }
    if poly.len() < 3 {
        return Err(Error::Geometry("polygon needs at least three vertices".into()));
    }
    if poly.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::Geometry("non-finite polygon vertex".into()));
    }
    let n = poly.len();
    for i in 0..n {
        if poly[i] == poly[(i + 1) % n] {
            return Err(Error::Geometry(format!("zero-length edge at vertex {i}")));
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if adjacent {
                // adjacent edges may only share their common vertex
                let (shared, other_a, other_b) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                if orient(other_a, shared, other_b) == 0.0
                    && (other_a[0] - shared[0]) * (other_b[0] - shared[0])
                        + (other_a[1] - shared[1]) * (other_b[1] - shared[1])
                        > 0.0
                {
                    return Err(Error::Geometry(format!("edges {i} and {j} overlap")));
                }
            } else if segments_intersect(a, b, c, d) {
                return Err(Error::Geometry(format!("polygon self-intersects (edges {i} and {j})")));
            }
        }
    }
    let area: f64 = (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        * 0.5;
    if area < 0.0 {
        poly.reverse();
    }
    Ok(poly)
}

fn on_polygon_boundary(p: Point, poly: &[Point], tol: f64) -> bool {
    let n = poly.len();
    (0..n).any(|i| point_segment_distance(p, poly[i], poly[(i + 1) % n]) <= tol)
}

/// Triangulates a simple polygon with maximum element diameter at most `h`.
///
/// Rectilinear polygons get a tensor-grid mesh of right triangles, so the
/// result is non-obtuse. Other polygons are ear-clipped and refined
/// uniformly; obtuse elements then set the degradation flag.
pub fn build_mesh(polygon: &[Point], h: f64) -> Result<Mesh> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Argument(format!("mesh size must be positive, got {h}")));
    }
    let poly = normalize_polygon(polygon)?;
    let n = poly.len();
    let rectilinear = (0..n).all(|i| {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        a[0] == b[0] || a[1] == b[1]
    });
    if rectilinear {
        tensor_mesh(&poly, h)
    } else {
        clipped_mesh(&poly, h)
    }
}

fn axis_nodes(coords: impl Iterator<Item = f64>, step: f64) -> Vec<f64> {
    let mut breaks: Vec<f64> = coords.collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut nodes = vec![breaks[0]];
    for w in breaks.windows(2) {
        let gap = w[1] - w[0];
        let m = ((gap / step) - 1e-12).ceil().max(1.0) as usize;
        for k in 1..m {
            nodes.push(w[0] + gap * k as f64 / m as f64);
        }
        nodes.push(w[1]);
    }
    nodes
}

fn tensor_mesh(poly: &[Point], h: f64) -> Result<Mesh> {
    // cell diagonals stay below h
    let step = h / std::f64::consts::SQRT_2;
    let xs = axis_nodes(poly.iter().map(|v| v[0]), step);
    let ys = axis_nodes(poly.iter().map(|v| v[1]), step);
    let (nx, ny) = (xs.len(), ys.len());
    let scale = (xs[nx - 1] - xs[0]).max(ys[ny - 1] - ys[0]);
    let tol = 1e-12 * scale;

    let mut index = vec![usize::MAX; nx * ny];
    let mut vertices = Vec::new();
    let mut on_boundary = Vec::new();
    let mut node = |i: usize, j: usize, vertices: &mut Vec<Point>, on_boundary: &mut Vec<bool>| {
        let k = j * nx + i;
        if index[k] == usize::MAX {
            index[k] = vertices.len();
            let p = [xs[i], ys[j]];
            vertices.push(p);
            on_boundary.push(on_polygon_boundary(p, poly, tol));
        }
        index[k]
    };

    let mut triangles = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let centre = [0.5 * (xs[i] + xs[i + 1]), 0.5 * (ys[j] + ys[j + 1])];
            if !point_in_polygon(centre, poly) {
                continue;
            }
            let ll = node(i, j, &mut vertices, &mut on_boundary);
            let lr = node(i + 1, j, &mut vertices, &mut on_boundary);
            let ur = node(i + 1, j + 1, &mut vertices, &mut on_boundary);
            let ul = node(i, j + 1, &mut vertices, &mut on_boundary);
            let rising = [[ll, lr, ur], [ll, ur, ul]];
            let falling = [[ll, lr, ul], [lr, ur, ul]];
            let all_boundary =
                |ts: &[[usize; 3]; 2]| ts.iter().any(|t| t.iter().all(|&v| on_boundary[v]));
            let mut split = if (i + j) % 2 == 0 { rising } else { falling };
            if all_boundary(&split) {
                let other = if (i + j) % 2 == 0 { falling } else { rising };
                if !all_boundary(&other) {
                    split = other;
                }
            }
            triangles.extend(split);
        }
    }
    if triangles.is_empty() {
        return Err(Error::Geometry("polygon contains no grid cells".into()));
    }
    let boundary: Vec<usize> = (0..vertices.len()).filter(|&v| on_boundary[v]).collect();
    Mesh::from_parts(vertices, triangles, &boundary)
}

fn ear_clip(poly: &[Point]) -> Result<Vec<[usize; 3]>> {
    let mut idx: Vec<usize> = (0..poly.len()).collect();
    let mut tris = Vec::new();
    while idx.len() > 3 {
        let m = idx.len();
        let ear = (0..m).find(|&k| {
            let (a, b, c) = (idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]);
            if orient(poly[a], poly[b], poly[c]) <= 0.0 {
                return false;
            }
            idx.iter().all(|&v| {
                if v == a || v == b || v == c {
                    return true;
                }
                let p = poly[v];
                !(orient(poly[a], poly[b], p) >= 0.0
                    && orient(poly[b], poly[c], p) >= 0.0
                    && orient(poly[c], poly[a], p) >= 0.0)
            })
        });
        let Some(k) = ear else {
            return Err(Error::Geometry("ear clipping failed".into()));
        };
        tris.push([idx[(k + m - 1) % m], idx[k], idx[(k + 1) % m]]);
        idx.remove(k);
    }
    tris.push([idx[0], idx[1], idx[2]]);
    Ok(tris)
}

fn clipped_mesh(poly: &[Point], h: f64) -> Result<Mesh> {
    let mut vertices: Vec<Point> = poly.to_vec();
    let mut triangles = ear_clip(poly)?;
    let max_diam = |v: &[Point], t: &[[usize; 3]]| {
        t.iter()
            .map(|t| diameter(&[v[t[0]], v[t[1]], v[t[2]]]))
            .fold(0.0, f64::max)
    };
    while max_diam(&vertices, &triangles) > h {
        let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
        let mut refined = Vec::with_capacity(4 * triangles.len());
        for t in &triangles {
            let mut mid = |a: usize, b: usize| {
                *midpoint.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    let (p, q) = (vertices[a], vertices[b]);
                    vertices.push([0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1])]);
                    vertices.len() - 1
                })
            };
            let (m01, m12, m20) = (mid(t[0], t[1]), mid(t[1], t[2]), mid(t[2], t[0]));
            refined.extend([[t[0], m01, m20], [m01, t[1], m12], [m20, m12, t[2]], [m01, m12, m20]]);
        }
        triangles = refined;
    }
    let scale = max_diam(poly, &ear_clip(poly)?);
    let boundary: Vec<usize> = (0..vertices.len())
        .filter(|&v| on_polygon_boundary(vertices[v], poly, 1e-12 * scale))
        .collect();
    Mesh::from_parts(vertices, triangles, &boundary)
}

/// The unit square `[0,1]²`.
pub fn unit_square() -> Vec<Point> {
    vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_square_half() {
        let m = build_mesh(&unit_square(), 0.5).unwrap();
        assert_eq!(m.n_vertices(), 16);
        assert_eq!(m.n_triangles(), 18);
        assert_eq!(m.boundary_vertices().len(), 12);
        assert!(!m.is_degraded());
        assert!(m.h() <= 0.5);
    }

    #[test]
    fn right_angles_on_square() {
        let m = build_mesh(&unit_square(), 0.25).unwrap();
        assert!(m.max_angle() <= 0.5 * std::f64::consts::PI + 1e-9);
        // no element has all vertices on the boundary
        for t in m.triangles() {
            assert!(t.iter().any(|&v| !m.is_boundary(v)));
        }
    }

    #[test]
    fn l_shape_area() {
        let l = [[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]];
        let m = build_mesh(&l, 0.1).unwrap();
        assert!((m.total_area() - 3.0).abs() < 1e-12);
        assert!(m.h() <= 0.15);
        assert!(!m.is_degraded());
        for &b in &m.boundary_vertices() {
            let p = m.vertices()[b];
            assert!(on_polygon_boundary(p, &l, 1e-12));
        }
    }

    #[test]
    fn general_polygon_is_flagged_when_obtuse() {
        let tri = [[0.0, 0.0], [3.0, 0.0], [0.2, 0.5]];
        let m = build_mesh(&tri, 0.5).unwrap();
        assert!(m.is_degraded());
        assert!((m.total_area() - 0.75).abs() < 1e-12);
        assert!(m.h() <= 0.5);
    }

    #[test]
    fn self_intersection_is_rejected() {
        let bow = [[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(build_mesh(&bow, 0.1), Err(Error::Geometry(_))));
    }

    #[test]
    fn clockwise_input_is_accepted() {
        let mut sq = unit_square();
        sq.reverse();
        let m = build_mesh(&sq, 0.5).unwrap();
        assert_eq!(m.n_triangles(), 18);
        assert!((0..m.n_triangles()).all(|e| m.area(e) > 0.0));
    }
}
