use std::fmt::Write as _;
use std::path::Path;

use super::mesh::Mesh;
use super::space::DiscreteField;
use crate::error::{Error, Result};

/// Plain-text mesh: `v x y`, `t i j k` and `b i` lines.
pub fn mesh_to_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    for v in mesh.vertices() {
        let _ = writeln!(s, "v {:?} {:?}", v[0], v[1]);
    }
    for t in mesh.triangles() {
        let _ = writeln!(s, "t {} {} {}", t[0], t[1], t[2]);
    }
    for b in mesh.boundary_vertices() {
        let _ = writeln!(s, "b {b}");
    }
    s
}

pub fn parse_mesh(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut boundary = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |column: usize, message: String| Error::Parse {
            line: ln + 1,
            column,
            message,
        };
        let mut it = line.split_whitespace();
        let tag = it.next().unwrap_or_default();
        let fields: Vec<&str> = it.collect();
        let expect = match tag {
            "v" => 2,
            "t" => 3,
            "b" => 1,
            other => return Err(err(1, format!("unknown record `{other}`"))),
        };
        if fields.len() != expect {
            return Err(err(1, format!("`{tag}` expects {expect} fields, found {}", fields.len())));
        }
        let column_of = |k: usize| line.find(fields[k]).map_or(1, |c| c + 1);
        match tag {
            "v" => {
                let mut p = [0.0; 2];
                for k in 0..2 {
                    p[k] = fields[k]
                        .parse()
                        .map_err(|_| err(column_of(k), format!("bad coordinate `{}`", fields[k])))?;
                }
                vertices.push(p);
            }
            _ => {
                let mut idx = [0usize; 3];
                for k in 0..expect {
                    idx[k] = fields[k]
                        .parse()
                        .map_err(|_| err(column_of(k), format!("bad index `{}`", fields[k])))?;
                }
                if tag == "t" {
                    triangles.push(idx);
                } else {
                    boundary.push(idx[0]);
                }
            }
        }
    }
    Mesh::from_parts(vertices, triangles, &boundary)
}

pub fn write_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    std::fs::write(path, mesh_to_string(mesh)).map_err(|e| Error::io(path, e))
}

pub fn read_mesh(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mesh(&text)
}

/// CSV `x,y,value[,gx,gy]` with vertex-recovered gradients.
pub fn field_to_csv(u: &DiscreteField, with_gradients: bool) -> String {
    let mesh = u.space().mesh();
    let grads = with_gradients.then(|| u.vertex_gradients());
    let mut s = String::from(if with_gradients { "x,y,value,gx,gy\n" } else { "x,y,value\n" });
    for (v, p) in mesh.vertices().iter().enumerate() {
        let _ = write!(s, "{:?},{:?},{:?}", p[0], p[1], u.values()[v]);
        if let Some(g) = &grads {
            let _ = write!(s, ",{:?},{:?}", g[v][0], g[v][1]);
        }
        s.push('\n');
    }
    s
}

pub fn write_field_csv(u: &DiscreteField, path: &Path, with_gradients: bool) -> Result<()> {
    std::fs::write(path, field_to_csv(u, with_gradients)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh_fem::{build_mesh, unit_square, FemSpace};
    use std::sync::Arc;

    #[test]
    fn mesh_text_round_trip() {
        let m = build_mesh(&unit_square(), 0.3).unwrap();
        let back = parse_mesh(&mesh_to_string(&m)).unwrap();
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.triangles(), m.triangles());
        assert_eq!(back.boundary_vertices(), m.boundary_vertices());
    }

    #[test]
    fn parse_errors_carry_positions() {
        let e = parse_mesh("v 0 0\nv 1 zz\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, column: 5, .. }), "{e:?}");
        assert!(matches!(parse_mesh("q 1\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn csv_layout() {
        let s = FemSpace::new(Arc::new(build_mesh(&unit_square(), 0.5).unwrap())).unwrap();
        let u = DiscreteField::interpolate(&s, |p| p[0]);
        let csv = field_to_csv(&u, true);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x,y,value,gx,gy");
        assert_eq!(lines.len(), 17);
        let g: Vec<f64> = lines[1].split(',').map(|t| t.parse().unwrap()).collect();
        assert!((g[3] - 1.0).abs() < 1e-12 && g[4].abs() < 1e-12);
    }
}
