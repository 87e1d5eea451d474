//! P1 finite elements on polygons: meshing, the Dirichlet space, the
//! boundary distance and singular-weight quadrature.

mod distance;
mod io;
mod mesh;
mod singular;
mod space;

pub use distance::{distance_field, DistanceField};
pub use io::{field_to_csv, mesh_to_string, parse_mesh, read_mesh, write_field_csv, write_mesh};
pub use mesh::{build_mesh, normalize_polygon, unit_square, Mesh, Point};
pub use singular::{graded_integral, hardy_quotient, integrate_singular, SingularIntegral, BASE_LEVELS};
pub use space::{DiscreteField, FemSpace};
