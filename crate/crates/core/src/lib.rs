//! Finite-element laboratory for the Dirichlet problem
//! `−Δ_p u = f(u) + g(∇u)` with singular, discontinuous reactions.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod cli_io;
pub mod error;
pub mod expr;
pub mod linalg;
pub mod measure_lab;
pub mod mesh_fem;
pub mod plap_core;
pub mod problem_def;
pub mod quadrature;
pub mod regularization;
pub mod scheme;

pub use error::{Error, Result};
