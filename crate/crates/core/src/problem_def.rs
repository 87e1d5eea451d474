//! Reaction terms `f(s)` and `g(ξ)`: piecewise closed-form descriptions with
//! declared discontinuity sets, envelope estimation and hypothesis checks.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::measure_lab::{cover_length, IntervalCover};

/// Closed-form expression on a half-open interval `[lo, hi)`.
#[derive(Debug, Clone)]
pub struct Piece1d {
    pub lo: f64,
    pub hi: f64,
    pub expr: Expr,
}

/// A function on `(lower, ∞)` given by consecutive pieces.
#[derive(Debug, Clone)]
pub struct Piecewise1d {
    pieces: Vec<Piece1d>,
}

impl Piecewise1d {
    /// Pieces must be contiguous and cover `[lower, ∞)`.
    pub fn new(pieces: Vec<Piece1d>, lower: f64) -> Result<Self> {
        let Some(first) = pieces.first() else {
            return Err(Error::Argument("piecewise function needs at least one piece".into()));
        };
        if first.lo != lower {
            return Err(Error::Argument(format!("first piece must start at {lower}, found {}", first.lo)));
        }
        if pieces.last().map(|p| p.hi) != Some(f64::INFINITY) {
            return Err(Error::Argument("last piece must extend to +inf".into()));
        }
        for (k, w) in pieces.windows(2).enumerate() {
            if w[0].hi != w[1].lo {
                return Err(Error::Argument(format!("pieces {k} and {} are not contiguous", k + 1)));
            }
        }
        if let Some(k) = pieces.iter().position(|p| !(p.lo < p.hi)) {
            return Err(Error::Argument(format!("piece {k} is empty")));
        }
        Ok(Piecewise1d { pieces })
    }

    /// Single expression on `[lower, ∞)`.
    pub fn single(expr: Expr, lower: f64) -> Self {
        Piecewise1d {
            pieces: vec![Piece1d {
                lo: lower,
                hi: f64::INFINITY,
                expr,
            }],
        }
    }

    pub fn pieces(&self) -> &[Piece1d] {
        &self.pieces
    }

    fn index(&self, x: f64) -> Option<usize> {
        if x < self.pieces[0].lo || x.is_nan() {
            return None;
        }
        Some(self.pieces.partition_point(|p| p.lo <= x) - 1)
    }

    /// Value at `x`, with piece expressions read as functions of `xi1`.
    pub fn eval_factor(&self, x: f64) -> f64 {
        self.index(x).map_or(f64::NAN, |k| self.eval_piece(k, x, false))
    }

    /// Interior piece boundaries.
    pub fn breakpoints(&self) -> Vec<f64> {
        self.pieces[1..].iter().map(|p| p.lo).collect()
    }

    fn eval_piece(&self, k: usize, x: f64, scalar: bool) -> f64 {
        if scalar {
            self.pieces[k].expr.eval_scalar(x)
        } else {
            self.pieces[k].expr.eval_vector(&[x])
        }
    }

    fn exprs_mut(&mut self) -> impl Iterator<Item = &mut Expr> {
        self.pieces.iter_mut().map(|p| &mut p.expr)
    }

    fn exprs(&self) -> impl Iterator<Item = &Expr> {
        self.pieces.iter().map(|p| &p.expr)
    }
}

/// Closed-form expression on a half-open box `[lo, hi)`.
#[derive(Debug, Clone)]
pub struct BoxPiece {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub expr: Expr,
}

/// Shape of a vector-argument reaction.
#[derive(Debug, Clone)]
pub enum VectorForm {
    /// Box pieces partitioning `ℝᴺ`.
    Boxes(Vec<BoxPiece>),
    /// `g(ξ) = ∏ gᵢ(ξᵢ)`; factor expressions use the variable `xi1`.
    Product(Vec<Piecewise1d>),
}

#[derive(Debug, Clone)]
enum Kind {
    Scalar(Piecewise1d),
    Vector { dim: usize, form: VectorForm },
}

/// A reaction term with its declared discontinuity set.
///
/// Scalar specs describe `f` on `(0, ∞)`; the declared set is a finite list
/// of points (piece boundaries are always included). Vector specs describe
/// `g` on `ℝᴺ`; the declared set is given per axis as closed intervals that
/// cover the axis projections (box faces and factor breakpoints are always
/// included).
#[derive(Debug, Clone)]
pub struct NonlinearitySpec {
    kind: Kind,
    declared_points: Vec<f64>,
    declared_axes: Vec<Vec<(f64, f64)>>,
    gamma: Option<f64>,
    scale: f64,
}

/// Identifies one piece (scalar/box) or one tuple of factor pieces.
#[derive(Debug, Clone, PartialEq)]
enum CellId {
    Piece(usize),
    Tuple(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Cell {
    id: CellId,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn check_gamma(gamma: Option<f64>) -> Result<()> {
    match gamma {
        Some(g) if !(g > 0.0 && g < 1.0) => Err(Error::constraint("gamma", format!("must lie in (0,1), got {g}"))),
        _ => Ok(()),
    }
}

impl NonlinearitySpec {
    /// Scalar `f` on `(0, ∞)`.
    pub fn scalar(pieces: Vec<Piece1d>, discontinuities: Vec<f64>, gamma: Option<f64>) -> Result<Self> {
        check_gamma(gamma)?;
        let f = Piecewise1d::new(pieces, 0.0)?;
        for e in f.exprs() {
            if e.max_xi() > 0 {
                return Err(Error::Argument(format!("scalar expression `{e}` uses xi")));
            }
        }
        if let Some(d) = discontinuities.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::Argument(format!("declared discontinuity {d} outside (0, inf)")));
        }
        let mut declared_points = discontinuities;
        declared_points.extend(f.breakpoints());
        declared_points.sort_by(f64::total_cmp);
        declared_points.dedup();
        Ok(NonlinearitySpec {
            kind: Kind::Scalar(f),
            declared_points,
            declared_axes: Vec::new(),
            gamma,
            scale: 1.0,
        })
    }

    /// Scalar `f` given by one expression in `s`.
    pub fn scalar_expr(source: &str, gamma: Option<f64>) -> Result<Self> {
        let expr = Expr::parse(source)?;
        Self::scalar(
            vec![Piece1d {
                lo: 0.0,
                hi: f64::INFINITY,
                expr,
            }],
            Vec::new(),
            gamma,
        )
    }

    /// Vector `g` on `ℝᴺ` given by box pieces.
    pub fn vector_boxes(dim: usize, pieces: Vec<BoxPiece>, declared_axes: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("dimension must be positive".into()));
        }
        if pieces.is_empty() {
            return Err(Error::Argument("vector spec needs at least one piece".into()));
        }
        for (k, b) in pieces.iter().enumerate() {
            if b.lo.len() != dim || b.hi.len() != dim {
                return Err(Error::Argument(format!("box piece {k} has wrong dimension")));
            }
            if b.lo.iter().zip(&b.hi).any(|(l, h)| !(l < h)) {
                return Err(Error::Argument(format!("box piece {k} is empty")));
            }
            if b.expr.uses_s() || b.expr.max_xi() > dim {
                return Err(Error::Argument(format!("expression `{}` uses variables outside xi1..xi{dim}", b.expr)));
            }
        }
        let mut axes = normalise_axes(dim, declared_axes)?;
        for b in &pieces {
            for i in 0..dim {
                for c in [b.lo[i], b.hi[i]] {
                    if c.is_finite() {
                        axes[i].push((c, c));
                    }
                }
            }
        }
        let spec = NonlinearitySpec {
            kind: Kind::Vector {
                dim,
                form: VectorForm::Boxes(pieces),
            },
            declared_points: Vec::new(),
            declared_axes: dedup_axes(axes),
            gamma: None,
            scale: 1.0,
        };
        spec.check_box_partition()?;
        Ok(spec)
    }

    /// Vector `g` given by one expression in `xi1..xiN`.
    pub fn vector_expr(dim: usize, source: &str) -> Result<Self> {
        let expr = Expr::parse(source)?;
        Self::vector_boxes(
            dim,
            vec![BoxPiece {
                lo: vec![f64::NEG_INFINITY; dim],
                hi: vec![f64::INFINITY; dim],
                expr,
            }],
            vec![Vec::new(); dim],
        )
    }

    /// Product form `g(ξ) = ∏ gᵢ(ξᵢ)`; each factor lives on `ℝ`.
    pub fn product(factors: Vec<Piecewise1d>, declared_axes: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        let dim = factors.len();
        if dim == 0 {
            return Err(Error::Argument("product needs at least one factor".into()));
        }
        for f in &factors {
            if f.pieces[0].lo != f64::NEG_INFINITY {
                return Err(Error::Argument("product factors must be defined on all of R".into()));
            }
            for e in f.exprs() {
                if e.uses_s() || e.max_xi() > 1 {
                    return Err(Error::Argument(format!("factor expression `{e}` may only use xi1")));
                }
            }
        }
        let mut axes = normalise_axes(dim, declared_axes)?;
        for (i, f) in factors.iter().enumerate() {
            axes[i].extend(f.breakpoints().into_iter().map(|c| (c, c)));
        }
        Ok(NonlinearitySpec {
            kind: Kind::Vector {
                dim,
                form: VectorForm::Product(factors),
            },
            declared_points: Vec::new(),
            declared_axes: dedup_axes(axes),
            gamma: None,
            scale: 1.0,
        })
    }

    /// The same spec multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Self {
        NonlinearitySpec {
            scale: self.scale * c,
            ..self.clone()
        }
    }

    pub fn is_scalar(&self) -> bool {
        matches!(self.kind, Kind::Scalar(_))
    }

    /// Argument dimension (1 for scalar specs).
    pub fn dim(&self) -> usize {
        match &self.kind {
            Kind::Scalar(_) => 1,
            Kind::Vector { dim, .. } => *dim,
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: Option<f64>) -> Result<()> {
        check_gamma(gamma)?;
        self.gamma = gamma;
        Ok(())
    }

    pub fn form(&self) -> Option<&VectorForm> {
        match &self.kind {
            Kind::Vector { form, .. } => Some(form),
            Kind::Scalar(_) => None,
        }
    }

    pub fn scalar_pieces(&self) -> Option<&Piecewise1d> {
        match &self.kind {
            Kind::Scalar(f) => Some(f),
            Kind::Vector { .. } => None,
        }
    }

    /// Declared discontinuity points of a scalar spec.
    pub fn declared_points(&self) -> &[f64] {
        &self.declared_points
    }

    /// Per-axis declared intervals of a vector spec.
    pub fn declared_axes(&self) -> &[Vec<(f64, f64)>] {
        &self.declared_axes
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    fn exprs(&self) -> Vec<&Expr> {
        match &self.kind {
            Kind::Scalar(f) => f.exprs().collect(),
            Kind::Vector { form: VectorForm::Boxes(b), .. } => b.iter().map(|p| &p.expr).collect(),
            Kind::Vector { form: VectorForm::Product(fs), .. } => fs.iter().flat_map(|f| f.exprs()).collect(),
        }
    }

    /// Binds a named parameter in every expression.
    pub fn bind(&mut self, name: &str, value: f64) {
        match &mut self.kind {
            Kind::Scalar(f) => f.exprs_mut().for_each(|e| e.bind(name, value)),
            Kind::Vector { form: VectorForm::Boxes(b), .. } => b.iter_mut().for_each(|p| p.expr.bind(name, value)),
            Kind::Vector { form: VectorForm::Product(fs), .. } => {
                fs.iter_mut().for_each(|f| f.exprs_mut().for_each(|e| e.bind(name, value)))
            }
        }
    }

    pub fn unbound_params(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in self.exprs() {
            for p in e.unbound_params() {
                if !out.contains(&p) {
                    out.push(p);
                }
            }
        }
        out
    }

    /// True when every expression is constant (no variables, no parameters).
    pub fn is_identically_zero(&self) -> bool {
        self.exprs().iter().all(|e| e.is_constant() && e.eval_scalar(0.0) == 0.0)
    }

    /// Checks that all parameters are bound and every expression is
    /// nonnegative on sampled points of its region.
    pub fn validate(&self) -> Result<()> {
        let unbound = self.unbound_params();
        if !unbound.is_empty() {
            return Err(Error::Argument(format!("unbound parameters: {}", unbound.join(", "))));
        }
        for (k, cell) in self.all_cells().iter().enumerate() {
            for x in cell_samples(&cell.lo, &cell.hi, 16, true) {
                let v = self.eval_cell(&cell.id, &x);
                if v < 0.0 {
                    return Err(Error::Domain(format!(
                        "expression of piece {k} is negative ({v:.3e}) at {x:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `f(s)` (NaN outside `(0, ∞)`).
    pub fn eval_scalar(&self, s: f64) -> f64 {
        match &self.kind {
            Kind::Scalar(f) => match f.index(s) {
                Some(k) if s > 0.0 => self.scale * f.eval_piece(k, s, true),
                _ => f64::NAN,
            },
            Kind::Vector { .. } => f64::NAN,
        }
    }

    /// `g(ξ)`.
    pub fn eval_vector(&self, xi: &[f64]) -> f64 {
        match &self.kind {
            Kind::Scalar(_) => f64::NAN,
            Kind::Vector { form: VectorForm::Boxes(b), .. } => b
                .iter()
                .find(|p| in_box(&p.lo, &p.hi, xi))
                .map_or(f64::NAN, |p| self.scale * p.expr.eval_vector(xi)),
            Kind::Vector { form: VectorForm::Product(fs), .. } => {
                let mut v = self.scale;
                for (f, &x) in fs.iter().zip(xi) {
                    match f.index(x) {
                        Some(k) => v *= f.eval_piece(k, x, false),
                        None => return f64::NAN,
                    }
                }
                v
            }
        }
    }

    /// Evaluates at a point of `ℝ^dim` (scalar specs take `x[0]`).
    pub fn eval(&self, x: &[f64]) -> f64 {
        if self.is_scalar() {
            self.eval_scalar(x[0])
        } else {
            self.eval_vector(x)
        }
    }

    /// Value of the expression of a given cell, extended to its closure.
    fn eval_cell(&self, id: &CellId, x: &[f64]) -> f64 {
        match (&self.kind, id) {
            (Kind::Scalar(f), CellId::Piece(k)) => self.scale * f.eval_piece(*k, x[0], true),
            (Kind::Vector { form: VectorForm::Boxes(b), .. }, CellId::Piece(k)) => {
                self.scale * b[*k].expr.eval_vector(x)
            }
            (Kind::Vector { form: VectorForm::Product(fs), .. }, CellId::Tuple(ks)) => {
                let mut v = self.scale;
                for ((f, &k), &xi) in fs.iter().zip(ks).zip(x) {
                    v *= f.eval_piece(k, xi, false);
                }
                v
            }
            _ => f64::NAN,
        }
    }

    fn all_cells(&self) -> Vec<Cell> {
        match &self.kind {
            Kind::Scalar(f) => f
                .pieces
                .iter()
                .enumerate()
                .map(|(k, p)| Cell {
                    id: CellId::Piece(k),
                    lo: vec![p.lo],
                    hi: vec![p.hi],
                })
                .collect(),
            Kind::Vector { form: VectorForm::Boxes(b), .. } => b
                .iter()
                .enumerate()
                .map(|(k, p)| Cell {
                    id: CellId::Piece(k),
                    lo: p.lo.clone(),
                    hi: p.hi.clone(),
                })
                .collect(),
            Kind::Vector { form: VectorForm::Product(fs), .. } => {
                let mut cells = vec![Cell {
                    id: CellId::Tuple(Vec::new()),
                    lo: Vec::new(),
                    hi: Vec::new(),
                }];
                for f in fs {
                    let mut next = Vec::new();
                    for c in &cells {
                        for (k, p) in f.pieces.iter().enumerate() {
                            let CellId::Tuple(ids) = &c.id else { unreachable!() };
                            let mut ids = ids.clone();
                            ids.push(k);
                            let mut lo = c.lo.clone();
                            let mut hi = c.hi.clone();
                            lo.push(p.lo);
                            hi.push(p.hi);
                            next.push(Cell {
                                id: CellId::Tuple(ids),
                                lo,
                                hi,
                            });
                        }
                    }
                    cells = next;
                }
                cells
            }
        }
    }

    /// Cells meeting the open max-norm ball, clipped to it (and to `s > 0`).
    fn cells_in_ball(&self, center: &[f64], radius: f64) -> Vec<Cell> {
        self.all_cells()
            .into_iter()
            .filter_map(|c| {
                let mut lo = Vec::with_capacity(center.len());
                let mut hi = Vec::with_capacity(center.len());
                for i in 0..center.len() {
                    let mut l = c.lo[i].max(center[i] - radius);
                    if self.is_scalar() {
                        l = l.max(0.0);
                    }
                    let h = c.hi[i].min(center[i] + radius);
                    if !(l < h) {
                        return None;
                    }
                    lo.push(l);
                    hi.push(h);
                }
                Some(Cell { id: c.id, lo, hi })
            })
            .collect()
    }

    fn on_declared(&self, x: &[f64]) -> bool {
        if self.is_scalar() {
            self.declared_points.contains(&x[0])
        } else {
            x.iter()
                .zip(&self.declared_axes)
                .any(|(&v, ivs)| ivs.iter().any(|&(a, b)| v >= a && v <= b))
        }
    }

    fn check_point(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.dim() {
            return Err(Error::Type(format!(
                "point has dimension {} but the spec has {}",
                point.len(),
                self.dim()
            )));
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite point".into()));
        }
        if self.is_scalar() && !(point[0] > 0.0) {
            return Err(Error::Domain(format!("{} lies outside (0, inf)", point[0])));
        }
        Ok(())
    }

    fn check_box_partition(&self) -> Result<()> {
        let Kind::Vector { dim, form: VectorForm::Boxes(b) } = &self.kind else {
            return Ok(());
        };
        // sample points avoiding faces
        let n = if *dim <= 2 { 41 } else { 9 };
        let mut idx = vec![0usize; *dim];
        loop {
            let x: Vec<f64> = idx.iter().map(|&k| -10.0 + 20.0 * (k as f64 + 0.37) / n as f64).collect();
            let hits = b.iter().filter(|p| in_box(&p.lo, &p.hi, &x)).count();
            if hits != 1 {
                return Err(Error::Argument(format!("box pieces cover {x:?} {hits} times")));
            }
            let mut i = 0;
            while i < *dim {
                idx[i] += 1;
                if idx[i] < n {
                    break;
                }
                idx[i] = 0;
                i += 1;
            }
            if i == *dim {
                return Ok(());
            }
        }
    }
}

fn normalise_axes(dim: usize, declared: Vec<Vec<(f64, f64)>>) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut axes = declared;
    if axes.is_empty() {
        axes = vec![Vec::new(); dim];
    }
    if axes.len() != dim {
        return Err(Error::Argument(format!("declared set has {} axes, expected {dim}", axes.len())));
    }
    for ivs in &axes {
        if ivs.iter().any(|&(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::Argument("declared intervals must be finite with lo <= hi".into()));
        }
    }
    Ok(axes)
}

fn dedup_axes(mut axes: Vec<Vec<(f64, f64)>>) -> Vec<Vec<(f64, f64)>> {
    for ivs in &mut axes {
        ivs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        ivs.dedup();
    }
    axes
}

fn in_box(lo: &[f64], hi: &[f64], x: &[f64]) -> bool {
    x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| v >= l && v < h)
}

/// Midpoint grid with `n` points per axis. Infinite sides are truncated at
/// ±1e3 (log-spaced when `wide`).
fn cell_samples(lo: &[f64], hi: &[f64], n: usize, wide: bool) -> Vec<Vec<f64>> {
    let axis = |l: f64, h: f64| -> Vec<f64> {
        if wide && (h - l > 1e3 || !h.is_finite() || !l.is_finite()) {
            // logarithmic coverage of large or unbounded ranges
            let l2 = l.max(-1e3);
            let h2 = h.min(1e3);
            let mut v: Vec<f64> = (0..n)
                .map(|k| {
                    let t = (k as f64 + 0.5) / n as f64;
                    l2 + (h2 - l2) * t
                })
                .collect();
            for k in 0..n {
                let m = 2f64.powf(-20.0 + 30.0 * k as f64 / n as f64);
                for c in [l + m, h - m] {
                    if c > l && c < h && c.is_finite() {
                        v.push(c);
                    }
                }
            }
            v
        } else {
            (0..n).map(|k| l + (h - l) * (k as f64 + 0.5) / n as f64).collect()
        }
    };
    let axes: Vec<Vec<f64>> = lo.iter().zip(hi).map(|(&l, &h)| axis(l, h)).collect();
    let mut out = vec![Vec::new()];
    for a in &axes {
        let mut next = Vec::with_capacity(out.len() * a.len());
        for prefix in &out {
            for &v in a {
                let mut p = prefix.clone();
                p.push(v);
                next.push(p);
            }
        }
        out = next;
    }
    out
}

/// Sample count per axis used by the envelope estimators.
pub const ENVELOPE_SAMPLES: usize = 64;
/// Number of radii in the default shrinking schedule.
pub const ENVELOPE_RADII: usize = 8;

/// Lower and upper envelope values at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopePair {
    pub lower: f64,
    pub upper: f64,
    pub radius_used: f64,
}

/// Shrinking schedule `δ₀ 2^{−k}`, `k < 8`.
pub fn default_radii(delta0: f64) -> Vec<f64> {
    (0..ENVELOPE_RADII).map(|k| delta0 * 0.5f64.powi(k as i32)).collect()
}

/// Default schedule for a point: `δ₀ = min(1/2, s/2)` for scalar specs so the
/// balls stay in `(0, ∞)`, `δ₀ = 1/2` otherwise.
pub fn default_radii_at(spec: &NonlinearitySpec, point: &[f64]) -> Vec<f64> {
    if spec.is_scalar() {
        default_radii(0.5 * point[0].min(1.0))
    } else {
        default_radii(0.5)
    }
}

struct CellStats {
    id: CellId,
    lo: Vec<f64>,
    hi: Vec<f64>,
    min: f64,
    max: f64,
}

fn sample_ball(spec: &NonlinearitySpec, point: &[f64], radius: f64) -> Vec<CellStats> {
    spec.cells_in_ball(point, radius)
        .into_iter()
        .filter_map(|c| {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for x in cell_samples(&c.lo, &c.hi, ENVELOPE_SAMPLES, false) {
                if spec.on_declared(&x) {
                    continue;
                }
                let v = spec.eval_cell(&c.id, &x);
                if v.is_nan() {
                    continue;
                }
                min = min.min(v);
                max = max.max(v);
            }
            (min <= max).then_some(CellStats {
                id: c.id,
                lo: c.lo,
                hi: c.hi,
                min,
                max,
            })
        })
        .collect()
}

fn projected(point: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    point.iter().zip(lo.iter().zip(hi)).map(|(&x, (&l, &h))| x.clamp(l, h)).collect()
}

/// Estimates `(lim ess inf, lim ess sup)` over shrinking max-norm balls.
///
/// Every piece meeting the smallest ball contributes its one-sided limit: the
/// value of its (continuous) expression at the nearest point of the piece
/// when finite, otherwise the extrapolated sampled inf/sup.
pub fn envelopes_at(spec: &NonlinearitySpec, point: &[f64], radii: &[f64]) -> Result<EnvelopePair> {
    spec.check_point(point)?;
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) || radii.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Argument("radii must be positive and strictly decreasing".into()));
    }
    // only the two smallest balls enter the estimate
    let last = sample_ball(spec, point, radii[radii.len() - 1]);
    let mut before: Option<Vec<CellStats>> = None;
    if last.is_empty() {
        return Err(Error::Domain("ball does not meet the domain".into()));
    }
    let mut lower = f64::INFINITY;
    let mut upper = f64::NEG_INFINITY;
    for cell in &last {
        let proj = projected(point, &cell.lo, &cell.hi);
        let v = spec.eval_cell(&cell.id, &proj);
        let (l, u) = if v.is_finite() {
            (v, v)
        } else {
            if before.is_none() && radii.len() >= 2 {
                before = Some(sample_ball(spec, point, radii[radii.len() - 2]));
            }
            let prev = before.as_ref().and_then(|cs| cs.iter().find(|c| c.id == cell.id));
            match prev {
                Some(pc) => {
                    let mut l = cell.min.max(2.0 * cell.min - pc.min);
                    let mut u = cell.max.min(2.0 * cell.max - pc.max);
                    if l > u {
                        let m = 0.5 * (l + u);
                        l = m;
                        u = m;
                    }
                    (l, u)
                }
                None => (cell.min, cell.max),
            }
        };
        lower = lower.min(l);
        upper = upper.max(u);
    }
    Ok(EnvelopePair {
        lower,
        upper,
        radius_used: *radii.last().expect("nonempty"),
    })
}

/// Sampled essential inf and sup over the open max-norm ball of the given
/// radius (declared sets excluded; one-sided limits at the centre included).
pub fn ball_envelope(spec: &NonlinearitySpec, point: &[f64], radius: f64) -> Result<(f64, f64)> {
    if point.len() != spec.dim() {
        return Err(Error::Type("point dimension mismatch".into()));
    }
    let cells = sample_ball(spec, point, radius);
    if cells.is_empty() {
        return Err(Error::Domain("ball does not meet the domain".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in &cells {
        lo = lo.min(c.min);
        hi = hi.max(c.max);
        let v = spec.eval_cell(&c.id, &projected(point, &c.lo, &c.hi));
        if !v.is_nan() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    Ok((lo, hi))
}

/// Flags of a hypothesis check, with explanatory notes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub flags: Vec<bool>,
    pub notes: Vec<String>,
    /// Exponent used for the boundedness of `s^γ f(s)` (scalar specs).
    pub gamma_used: Option<f64>,
}

impl HypothesisReport {
    pub fn all(&self) -> bool {
        self.flags.iter().all(|&f| f)
    }
}

/// Geometric schedule `2^{sign·k}`, `k = 0..=20`.
pub fn schedule(sign: i32) -> Vec<f64> {
    (0..=20).map(|k| 2f64.powi(sign * k)).collect()
}

const TAIL: std::ops::RangeInclusive<usize> = 15..=20;
const ZERO_TOL: f64 = 1e-12;

/// Log-spaced grid on `[2^{−20}, 2^{10}]` refined around declared points.
pub fn default_f_grid(spec: &NonlinearitySpec) -> Vec<f64> {
    let mut g: Vec<f64> = (0..=300).map(|k| 2f64.powf(-20.0 + 30.0 * k as f64 / 300.0)).collect();
    for &d in spec.declared_points() {
        for k in 1..=20 {
            let off = d.min(1.0) * 0.5f64.powi(k);
            g.push(d - off);
            g.push(d + off);
        }
        g.push(d);
    }
    g.sort_by(f64::total_cmp);
    g.dedup();
    g
}

fn tail_growth_ok(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
        && values[*TAIL.start()..=*TAIL.end()]
            .windows(2)
            .all(|w| w[1] <= 1.01 * w[0] + ZERO_TOL)
}

/// Checks (i) local boundedness, (ii) boundedness of `s^γ f(s)` near 0,
/// (iii) negligible declared set, (iv) `f̲(s) = 0 ⟹ f(s) = 0`.
pub fn check_hypotheses_f(spec: &NonlinearitySpec, sample_grid: &[f64]) -> Result<HypothesisReport> {
    let Some(f) = spec.scalar_pieces() else {
        return Err(Error::Type("f-hypotheses need a scalar spec".into()));
    };
    let mut notes = Vec::new();

    let mut bounded = true;
    for (k, p) in f.pieces().iter().enumerate() {
        let lo = p.lo.max(2f64.powi(-20));
        let hi = p.hi.min(2f64.powi(10));
        if lo >= hi {
            continue;
        }
        let sup = (0..256)
            .map(|j| spec.eval_scalar(lo + (hi - lo) * (j as f64 + 0.5) / 256.0))
            .fold(0.0, f64::max);
        if !sup.is_finite() {
            bounded = false;
            notes.push(format!("(i) piece {k} is unbounded on [{lo}, {hi}]"));
        }
    }
    if sample_grid.iter().any(|&s| s > 0.0 && !spec.eval_scalar(s).is_finite()) {
        bounded = false;
        notes.push("(i) non-finite value on the sample grid".into());
    }

    let weighted = |g: f64| -> Vec<f64> { schedule(-1).iter().map(|&s| s.powf(g) * spec.eval_scalar(s)).collect() };
    let (singular_ok, gamma_used) = match spec.gamma() {
        Some(g) => (tail_growth_ok(&weighted(g)), Some(g)),
        None => {
            let found = (1..20).map(|k| 0.05 * k as f64).find(|&g| tail_growth_ok(&weighted(g)));
            if let Some(g) = found {
                notes.push(format!("(ii) no gamma declared; s^{g:.2} f(s) stays bounded"));
            }
            (found.is_some(), found)
        }
    };
    if !singular_ok {
        notes.push("(ii) s^gamma f(s) grows along s = 2^-k".into());
    }

    let negligible = spec.declared_points().iter().all(|d| d.is_finite());

    let mut zero_ok = true;
    let mut points: Vec<f64> = spec.declared_points().to_vec();
    points.extend(sample_grid.iter().copied().filter(|&s| s > 0.0));
    for s in points {
        let env = envelopes_at(spec, &[s], &default_radii_at(spec, &[s]))?;
        if env.lower <= ZERO_TOL && spec.eval_scalar(s) > ZERO_TOL {
            zero_ok = false;
            notes.push(format!("(iv) lower envelope vanishes at {s} but f({s}) = {}", spec.eval_scalar(s)));
            break;
        }
    }
    Ok(HypothesisReport {
        flags: vec![bounded, singular_ok, negligible, zero_ok],
        notes,
        gamma_used,
    })
}

/// Sample points of `[-r, r]^N` (midpoint grid).
fn box_grid(dim: usize, r: f64, n: usize) -> Vec<Vec<f64>> {
    cell_samples(&vec![-r; dim], &vec![r; dim], n, false)
}

/// Checks (i) local boundedness, (ii) declared axis projections admit covers
/// of arbitrarily small length, (iii) `g̲(ξ) = 0 ⟹ g(ξ) = 0`.
pub fn check_hypotheses_g(spec: &NonlinearitySpec) -> Result<HypothesisReport> {
    if spec.is_scalar() {
        return Err(Error::Type("g-hypotheses need a vector spec".into()));
    }
    let dim = spec.dim();
    let mut notes = Vec::new();
    let grid = box_grid(dim, 8.0, if dim <= 2 { 33 } else { 9 });

    let bounded = grid.iter().all(|x| spec.eval_vector(x).is_finite());
    if !bounded {
        notes.push("(i) non-finite value on the sample box".into());
    }

    let mut small_covers = true;
    for (i, ivs) in spec.declared_axes().iter().enumerate() {
        let m = ivs.len().max(1) as f64;
        for eta in [1e-2, 1e-4, 1e-8] {
            let cover = IntervalCover::new(ivs.iter().map(|&(a, b)| (a - eta / (4.0 * m), b + eta / (4.0 * m))).collect());
            if cover_length(&cover) >= eta {
                small_covers = false;
                notes.push(format!("(ii) axis {} projection has no cover shorter than {eta}", i + 1));
                break;
            }
        }
    }

    let mut zero_ok = true;
    let mut points = Vec::new();
    let others = [-1.0, 0.0, 0.5, 2.0];
    for (i, ivs) in spec.declared_axes().iter().enumerate() {
        for &(a, b) in ivs {
            for c in [a, b] {
                for &o in &others {
                    let mut x = vec![o; dim];
                    x[i] = c;
                    points.push(x);
                }
            }
        }
    }
    points.extend(box_grid(dim, 4.0, if dim <= 2 { 9 } else { 5 }));
    for x in points {
        let env = envelopes_at(spec, &x, &default_radii(0.5))?;
        let v = spec.eval_vector(&x);
        if env.lower <= ZERO_TOL && v > ZERO_TOL {
            zero_ok = false;
            notes.push(format!("(iii) lower envelope vanishes at {x:?} but g = {v}"));
            break;
        }
    }
    Ok(HypothesisReport {
        flags: vec![bounded, small_covers, zero_ok],
        notes,
        gamma_used: None,
    })
}

/// Which small-solution condition holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum C0Branch {
    FBranch,
    GBranch,
    /// `liminf f(s)/s^{p−1}` is within the relative band 1e−6 of `λ₁` and
    /// the g-condition fails.
    Indeterminate,
    Fail,
}

/// Outcome of [`check_conditions`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub hf_flags: Vec<bool>,
    pub hg_flags: Vec<bool>,
    pub c0_branch: C0Branch,
    pub lf: f64,
    pub lg: f64,
    pub sigma: f64,
    pub coercivity_margin: f64,
    pub theta: f64,
    pub c_infinity: bool,
    /// Tail estimate of `liminf_{s→0} f(s)/s^{p−1}`.
    pub f_ratio_at_zero: f64,
    /// Tail estimate of `liminf_{ξ→0} g(ξ)`.
    pub g_inf_at_zero: f64,
    pub lf_tail_monotone: bool,
    pub lg_tail_monotone: bool,
    pub lambda1: f64,
    pub p: f64,
    pub notes: Vec<String>,
}

/// `1 − (Lf+σ)/λ₁ − (Lg+σ)/λ₁^{1/p}`.
pub fn coercivity_margin(lf: f64, lg: f64, lambda1: f64, p: f64, sigma: f64) -> f64 {
    1.0 - (lf + sigma) / lambda1 - (lg + sigma) / lambda1.powf(1.0 / p)
}

/// Half of the largest `σ` with positive margin, or `None` when the margin
/// at `σ = 0` is not positive.
pub fn default_sigma(lf: f64, lg: f64, lambda1: f64, p: f64) -> Option<f64> {
    let m0 = coercivity_margin(lf, lg, lambda1, p, 0.0);
    (m0 > 0.0).then(|| 0.5 * m0 / (1.0 / lambda1 + 1.0 / lambda1.powf(1.0 / p)))
}

fn monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] >= w[0]) || v.windows(2).all(|w| w[1] <= w[0])
}

/// Unit directions used for growth estimates of `g`.
fn directions(dim: usize) -> Vec<Vec<f64>> {
    if dim == 2 {
        return (0..64)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
                vec![t.cos(), t.sin()]
            })
            .collect();
    }
    let mut out = Vec::new();
    for code in 1..3usize.pow(dim as u32) {
        let mut c = code;
        let v: Vec<f64> = (0..dim)
            .map(|_| {
                let d = (c % 3) as f64 - 1.0;
                c /= 3;
                d
            })
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            out.push(v.iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Growth rate `limsup_{s→∞} f(s)/s^{p−1}` on the schedule `2^k`.
pub fn estimate_lf(fspec: &NonlinearitySpec, p: f64) -> (f64, bool) {
    let r: Vec<f64> = schedule(1).iter().map(|&s| fspec.eval_scalar(s) / s.powf(p - 1.0)).collect();
    let tail = &r[*TAIL.start()..=*TAIL.end()];
    (tail.iter().copied().fold(f64::NEG_INFINITY, f64::max), monotone(tail))
}

/// Growth rate `limsup_{|ξ|→∞} g(ξ)/|ξ|^{p−1}` on spheres of radius `2^k`.
pub fn estimate_lg(gspec: &NonlinearitySpec, p: f64) -> (f64, bool) {
    let dirs = directions(gspec.dim());
    let r: Vec<f64> = schedule(1)
        .iter()
        .map(|&s| {
            dirs.iter()
                .map(|d| {
                    let x: Vec<f64> = d.iter().map(|c| c * s).collect();
                    gspec.eval_vector(&x)
                })
                .fold(f64::NEG_INFINITY, f64::max)
                / s.powf(p - 1.0)
        })
        .collect();
    let tail = &r[*TAIL.start()..=*TAIL.end()];
    (tail.iter().copied().fold(f64::NEG_INFINITY, f64::max), monotone(tail))
}

/// Sampled `liminf_{s→0} f(s)/s^{p−1}` (tail minimum along `2^{−k}`).
pub fn f_ratio_at_zero(fspec: &NonlinearitySpec, p: f64) -> f64 {
    let r: Vec<f64> = schedule(-1).iter().map(|&s| fspec.eval_scalar(s) / s.powf(p - 1.0)).collect();
    r[*TAIL.start()..=*TAIL.end()].iter().copied().fold(f64::INFINITY, f64::min)
}

/// Sampled essential infimum of `g` over the ball of radius `r` at 0.
pub fn g_inf_near_zero(gspec: &NonlinearitySpec, r: f64) -> Result<f64> {
    ball_envelope(gspec, &vec![0.0; gspec.dim()], r).map(|(lo, _)| lo)
}

/// Evaluates the hypotheses and the conditions at zero and at infinity.
pub fn check_conditions(
    fspec: &NonlinearitySpec,
    gspec: &NonlinearitySpec,
    lambda1: f64,
    p: f64,
    sigma: f64,
) -> Result<ConditionReport> {
    if !(lambda1 > 0.0) || !lambda1.is_finite() {
        return Err(Error::Argument(format!("lambda1 must be positive, got {lambda1}")));
    }
    if !(p > 1.0) {
        return Err(Error::Argument(format!("p must exceed 1, got {p}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Argument(format!("sigma must be nonnegative, got {sigma}")));
    }
    let hf = check_hypotheses_f(fspec, &default_f_grid(fspec))?;
    let hg = check_hypotheses_g(gspec)?;
    let mut notes: Vec<String> = hf.notes.iter().chain(&hg.notes).cloned().collect();

    let f0 = f_ratio_at_zero(fspec, p);
    // liminf over shrinking balls is the ess inf over the smallest one
    let radii: Vec<f64> = schedule(-1);
    let g_tail: Vec<f64> = radii[*TAIL.start()..=*TAIL.end()]
        .iter()
        .map(|&r| g_inf_near_zero(gspec, r))
        .collect::<Result<_>>()?;
    let g0 = g_tail.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let band = 1e-6 * lambda1;
    let f_holds = f0 > lambda1 + band;
    let f_undecided = (f0 - lambda1).abs() <= band;
    let g_holds = g0 > ZERO_TOL;
    let c0_branch = if f_holds {
        C0Branch::FBranch
    } else if g_holds {
        C0Branch::GBranch
    } else if f_undecided {
        notes.push("(C0) liminf f(s)/s^(p-1) is within 1e-6 of lambda1".into());
        C0Branch::Indeterminate
    } else {
        C0Branch::Fail
    };

    let (lf, lf_mono) = estimate_lf(fspec, p);
    let (lg, lg_mono) = estimate_lg(gspec, p);
    Ok(ConditionReport {
        hf_flags: hf.flags,
        hg_flags: hg.flags,
        c0_branch,
        lf,
        lg,
        sigma,
        coercivity_margin: coercivity_margin(lf, lg, lambda1, p, sigma),
        theta: if c0_branch == C0Branch::GBranch { g0 } else { 0.0 },
        c_infinity: lf + lambda1.powf((p - 1.0) / p) * lg < lambda1,
        f_ratio_at_zero: f0,
        g_inf_at_zero: g0,
        lf_tail_monotone: lf_mono,
        lg_tail_monotone: lg_mono,
        lambda1,
        p,
        notes,
    })
}
