//! Finite box unions, interval covers and verifiers for the locality and
//! null-projection statements used to identify reactions on level sets.
//!
//! Axis indices in this module are 1-based, matching `xi1..xiN`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Finite union of closed axis-aligned boxes in `ℝᴺ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxSet {
    dim: usize,
    boxes: Vec<Vec<(f64, f64)>>,
}

impl BoxSet {
    pub fn new(dim: usize, boxes: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("box set dimension must be positive".into()));
        }
        for (k, b) in boxes.iter().enumerate() {
            if b.len() != dim {
                return Err(Error::Argument(format!("box {k} has {} sides, expected {dim}", b.len())));
            }
            if b.iter().any(|&(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                return Err(Error::Argument(format!("box {k} has a negative or non-finite side")));
            }
        }
        Ok(BoxSet { dim, boxes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn boxes(&self) -> &[Vec<(f64, f64)>] {
        &self.boxes
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn union(&self, other: &BoxSet) -> Result<BoxSet> {
        if self.dim != other.dim {
            return Err(Error::Argument("cannot unite box sets of different dimension".into()));
        }
        let mut boxes = self.boxes.clone();
        boxes.extend(other.boxes.iter().cloned());
        Ok(BoxSet { dim: self.dim, boxes })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.boxes
            .iter()
            .any(|b| b.iter().zip(x).all(|(&(l, h), &v)| v >= l && v <= h))
    }

    /// Euclidean distance from the origin to the set.
    pub fn distance_to_origin(&self) -> f64 {
        self.boxes
            .iter()
            .map(|b| {
                b.iter()
                    .map(|&(l, h)| {
                        let c = 0f64.clamp(l, h);
                        c * c
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Parses lines `box lo1 hi1 lo2 hi2 …`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<BoxSet> {
        let mut dim = None;
        let mut boxes = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap_or("");
            let mut col = 1;
            let mut tokens = Vec::new();
            let mut rest = content;
            while let Some(start) = rest.find(|c: char| !c.is_whitespace()) {
                col += start;
                rest = &rest[start..];
                let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
                tokens.push((col, &rest[..end]));
                col += end;
                rest = &rest[end..];
            }
            let Some(&(c0, head)) = tokens.first() else { continue };
            let err = |column: usize, message: String| Error::Parse {
                line: ln + 1,
                column,
                message,
            };
            if head != "box" {
                return Err(err(c0, format!("expected `box`, found `{head}`")));
            }
            let nums = tokens[1..]
                .iter()
                .map(|&(c, t)| t.parse::<f64>().map_err(|_| err(c, format!("invalid number `{t}`"))))
                .collect::<Result<Vec<f64>>>()?;
            if nums.is_empty() || nums.len() % 2 != 0 {
                return Err(err(c0, "a box needs an even, positive number of bounds".into()));
            }
            let d = nums.len() / 2;
            if *dim.get_or_insert(d) != d {
                return Err(err(c0, format!("box has dimension {d}, earlier boxes have {}", dim.unwrap())));
            }
            let sides: Vec<(f64, f64)> = nums.chunks(2).map(|c| (c[0], c[1])).collect();
            if let Some(k) = sides.iter().position(|&(l, h)| !(l <= h)) {
                return Err(err(tokens[1 + 2 * k].0, "lower bound exceeds upper bound".into()));
            }
            boxes.push(sides);
        }
        let dim = dim.ok_or_else(|| Error::Parse {
            line: 1,
            column: 1,
            message: "no boxes found".into(),
        })?;
        BoxSet::new(dim, boxes)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.boxes {
            out.push_str("box");
            for &(l, h) in b {
                out.push_str(&format!(" {l:e} {h:e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Finite family of intervals of `ℝ`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IntervalCover {
    intervals: Vec<(f64, f64)>,
}

impl IntervalCover {
    /// Degenerate or reversed pairs are kept as given; reversed pairs count
    /// as empty.
    pub fn new(intervals: Vec<(f64, f64)>) -> Self {
        IntervalCover { intervals }
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Sorted, pairwise disjoint union (touching intervals are joined).
    pub fn merged(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self.intervals.iter().copied().filter(|(a, b)| a <= b).collect();
        v.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
        for (a, b) in v {
            match out.last_mut() {
                Some(last) if a <= last.1 => last.1 = last.1.max(b),
                _ => out.push((a, b)),
            }
        }
        out
    }

    pub fn contains(&self, x: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| x >= a && x <= b)
    }
}

/// Total length of the merged cover.
pub fn cover_length(cover: &IntervalCover) -> f64 {
    cover.merged().iter().map(|(a, b)| b - a).sum()
}

fn check_axis(dim: usize, axis: usize) -> Result<usize> {
    if axis == 0 || axis > dim {
        return Err(Error::Argument(format!("axis {axis} outside 1..={dim}")));
    }
    Ok(axis - 1)
}

/// Projection of the set onto axis `axis` (1-based), merged.
pub fn axis_project(set: &BoxSet, axis: usize) -> Result<IntervalCover> {
    let i = check_axis(set.dim, axis)?;
    let cover = IntervalCover::new(set.boxes.iter().map(|b| b[i]).collect());
    Ok(IntervalCover::new(cover.merged()))
}

/// Scalar field sampled on the uniform grid with `n` cells per axis over
/// `∏[lo_i, hi_i]`; axis 1 varies fastest.
#[derive(Debug, Clone)]
pub struct GridField {
    lo: Vec<f64>,
    hi: Vec<f64>,
    n: usize,
    values: Vec<f64>,
}

impl GridField {
    pub fn sample<F>(lo: Vec<f64>, hi: Vec<f64>, n: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Argument("grid bounds must have equal, positive length".into()));
        }
        if n == 0 || lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Argument("grid needs n > 0 and lo < hi".into()));
        }
        let total = (n + 1).pow(lo.len() as u32);
        let mut g = GridField {
            lo,
            hi,
            n,
            values: Vec::new(),
        };
        g.values = (0..total).into_par_iter().map(|k| f(&g.point(&g.unflatten(k)))).collect();
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn cells(&self) -> usize {
        self.n
    }

    pub fn spacing(&self, axis0: usize) -> f64 {
        (self.hi[axis0] - self.lo[axis0]) / self.n as f64
    }

    fn unflatten(&self, mut k: usize) -> Vec<usize> {
        (0..self.dim())
            .map(|_| {
                let r = k % (self.n + 1);
                k /= self.n + 1;
                r
            })
            .collect()
    }

    fn flatten(&self, idx: &[usize]) -> usize {
        idx.iter().rev().fold(0, |acc, &i| acc * (self.n + 1) + i)
    }

    pub fn point(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(a, &i)| self.lo[a] + self.spacing(a) * i as f64)
            .collect()
    }

    pub fn value(&self, idx: &[usize]) -> f64 {
        self.values[self.flatten(idx)]
    }

    /// Grid indices along `axis0` whose coordinates lie in `[l, h]`.
    fn index_range(&self, axis0: usize, l: f64, h: f64) -> Option<(usize, usize)> {
        let s = self.spacing(axis0);
        let a = ((l - self.lo[axis0]) / s - 1e-9).ceil().max(0.0) as usize;
        let b = ((h - self.lo[axis0]) / s + 1e-9).floor().min(self.n as f64);
        if b < 0.0 || (a as f64) > b {
            return None;
        }
        Some((a, b as usize))
    }
}

/// Outcome of [`verify_locality`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LocalityResult {
    Verified {
        /// Fraction of grid points of `D` with `|∂_iφ| < tol`.
        fraction: f64,
        certification_rate: f64,
        fibres: usize,
        points: usize,
    },
    HypothesisNotMet {
        certification_rate: f64,
        fibres: usize,
    },
}

/// Image covers of a fibre must be shorter than this to count as null.
pub const HYPOTHESIS_TOL: f64 = 1e-6;
/// Required fraction of certified fibres.
pub const CERTIFICATION_RATE: f64 = 0.99;

/// Checks that `∂_iφ` vanishes on `D` wherever the images of the fibres of
/// `D` along axis `i` are null.
///
/// Each fibre image is covered by the value ranges of consecutive samples;
/// fibres whose cover is shorter than [`HYPOTHESIS_TOL`] are certified. If
/// fewer than [`CERTIFICATION_RATE`] of the fibres are certified the result is
/// `HypothesisNotMet`; otherwise the fraction of grid points of `D` with a
/// small finite difference (central, or one-sided towards `D`) is returned.
pub fn verify_locality(phi: &GridField, d: &BoxSet, axis: usize, tol: f64) -> Result<LocalityResult> {
    if phi.dim() != d.dim() {
        return Err(Error::Argument("field and box set dimensions differ".into()));
    }
    let i = check_axis(d.dim(), axis)?;
    let dim = d.dim();

    // fibres: per box, every grid line along axis i through the box
    let mut fibres: Vec<(Vec<usize>, Vec<(usize, usize)>)> = Vec::new();
    for b in d.boxes() {
        let Some(along) = phi.index_range(i, b[i].0, b[i].1) else { continue };
        let mut ranges = Vec::new();
        for a in 0..dim {
            if a == i {
                ranges.push((0, 0));
                continue;
            }
            match phi.index_range(a, b[a].0, b[a].1) {
                Some(r) => ranges.push(r),
                None => {
                    ranges.clear();
                    break;
                }
            }
        }
        if ranges.len() != dim {
            continue;
        }
        let mut idx: Vec<usize> = ranges.iter().map(|r| r.0).collect();
        loop {
            let key = idx.clone();
            match fibres.iter_mut().find(|(k, _)| *k == key) {
                Some((_, segs)) => segs.push(along),
                None => fibres.push((key, vec![along])),
            }
            let mut a = 0;
            while a < dim {
                if a != i && idx[a] < ranges[a].1 {
                    idx[a] += 1;
                    break;
                }
                if a != i {
                    idx[a] = ranges[a].0;
                }
                a += 1;
            }
            if a == dim {
                break;
            }
        }
    }
    if fibres.is_empty() {
        return Err(Error::Argument("box set contains no grid points".into()));
    }

    let certified = fibres
        .par_iter()
        .filter(|(key, segs)| {
            let mut ivs = Vec::new();
            for &(a, b) in segs {
                let mut idx = key.clone();
                idx[i] = a;
                let mut prev = phi.value(&idx);
                ivs.push((prev, prev));
                for k in a + 1..=b {
                    idx[i] = k;
                    let v = phi.value(&idx);
                    ivs.push((prev.min(v), prev.max(v)));
                    prev = v;
                }
            }
            cover_length(&IntervalCover::new(ivs)) < HYPOTHESIS_TOL
        })
        .count();
    let rate = certified as f64 / fibres.len() as f64;
    if rate < CERTIFICATION_RATE {
        return Ok(LocalityResult::HypothesisNotMet {
            certification_rate: rate,
            fibres: fibres.len(),
        });
    }

    let h = phi.spacing(i);
    let in_d = |idx: &[usize]| d.contains(&phi.point(idx));
    let (small, total) = fibres
        .par_iter()
        .map(|(key, segs)| {
            let mut seen = std::collections::BTreeSet::new();
            for &(a, b) in segs {
                seen.extend(a..=b);
            }
            let mut small = 0usize;
            let mut total = 0usize;
            for &k in &seen {
                let mut idx = key.clone();
                idx[i] = k;
                let v = phi.value(&idx);
                let nb = |k2: usize| {
                    let mut j = key.clone();
                    j[i] = k2;
                    in_d(&j).then(|| phi.value(&j))
                };
                let left = if k > 0 { nb(k - 1) } else { None };
                let right = if k < phi.cells() { nb(k + 1) } else { None };
                let deriv = match (left, right) {
                    (Some(l), Some(r)) => (r - l) / (2.0 * h),
                    (Some(l), None) => (v - l) / h,
                    (None, Some(r)) => (r - v) / h,
                    (None, None) => continue,
                };
                total += 1;
                if deriv.abs() < tol {
                    small += 1;
                }
            }
            (small, total)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(LocalityResult::Verified {
        fraction: if total == 0 { 1.0 } else { small as f64 / total as f64 },
        certification_rate: rate,
        fibres: fibres.len(),
        points: total,
    })
}

type MapFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A map `ℝᴺ → ℝᴹ` with a Lipschitz constant valid on the closed annulus
/// `K = {r_lo ≤ |ξ| ≤ r_hi}`, `r_lo > 0`.
#[derive(Clone)]
pub struct LipschitzMap {
    dim_in: usize,
    dim_out: usize,
    f: Arc<MapFn>,
    lip: f64,
    annulus: (f64, f64),
}

impl std::fmt::Debug for LipschitzMap {
    fn fmt(&self, fmt: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fmt.debug_struct("LipschitzMap")
            .field("dim_in", &self.dim_in)
            .field("dim_out", &self.dim_out)
            .field("lip", &self.lip)
            .field("annulus", &self.annulus)
            .finish()
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl LipschitzMap {
    /// Map with a supplied Lipschitz constant.
    pub fn new<F>(dim_in: usize, dim_out: usize, annulus: (f64, f64), lip: f64, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        if dim_in == 0 || dim_out == 0 {
            return Err(Error::Argument("map dimensions must be positive".into()));
        }
        if !(annulus.0 > 0.0 && annulus.0 < annulus.1) {
            return Err(Error::Argument("annulus needs 0 < r_lo < r_hi".into()));
        }
        if !(lip >= 0.0) || !lip.is_finite() {
            return Err(Error::Argument(format!("invalid Lipschitz constant {lip}")));
        }
        Ok(LipschitzMap {
            dim_in,
            dim_out,
            f: Arc::new(f),
            lip,
            annulus,
        })
    }

    /// Map whose constant is estimated by sampling `pairs` pairs in `K`
    /// (half of them at short range) and multiplying the largest difference
    /// quotient by 1.05.
    pub fn sampled<F>(dim_in: usize, dim_out: usize, annulus: (f64, f64), pairs: usize, seed: u64, f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    {
        let mut m = LipschitzMap::new(dim_in, dim_out, annulus, 0.0, f)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: f64 = 0.0;
        for k in 0..pairs {
            let x = m.sample_point(&mut rng);
            let y = if k % 2 == 0 {
                m.sample_point(&mut rng)
            } else {
                let step = 1e-4 * annulus.0;
                let y: Vec<f64> = x.iter().map(|v| v + step * (rng.gen::<f64>() * 2.0 - 1.0)).collect();
                if !m.in_annulus(&y) {
                    continue;
                }
                y
            };
            let dx = norm(&x.iter().zip(&y).map(|(a, b)| a - b).collect::<Vec<_>>());
            if dx == 0.0 {
                continue;
            }
            let (fx, fy) = ((m.f)(&x), (m.f)(&y));
            let df = norm(&fx.iter().zip(&fy).map(|(a, b)| a - b).collect::<Vec<_>>());
            best = best.max(df / dx);
        }
        m.lip = 1.05 * best;
        Ok(m)
    }

    /// `Ψ(ξ) = |ξ|^{p−2} ξ` on `ℝᴺ`.
    pub fn power_map(p: f64, dim: usize, annulus: (f64, f64), pairs: usize, seed: u64) -> Result<Self> {
        LipschitzMap::sampled(dim, dim, annulus, pairs, seed, move |x| {
            let r = norm(x).powf(p - 2.0);
            x.iter().map(|v| r * v).collect()
        })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn lip(&self) -> f64 {
        self.lip
    }

    pub fn annulus(&self) -> (f64, f64) {
        self.annulus
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }

    pub fn in_annulus(&self, x: &[f64]) -> bool {
        let r = norm(x);
        r >= self.annulus.0 && r <= self.annulus.1
    }

    pub fn sample_point(&self, rng: &mut impl Rng) -> Vec<f64> {
        let r = self.annulus.1;
        loop {
            let x: Vec<f64> = (0..self.dim_in).map(|_| r * (2.0 * rng.gen::<f64>() - 1.0)).collect();
            if self.in_annulus(&x) {
                return x;
            }
        }
    }
}

/// Achieved quantities of the covering construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NullProjectionReport {
    pub epsilon: f64,
    pub lip: f64,
    /// Total length of each per-axis cover of `D_i`.
    pub axis_cover_lengths: Vec<f64>,
    pub rectangles: usize,
    /// `Σ_k diam(Q_k)`.
    pub sum_diameters: f64,
    /// `Σ_k |Ĩ_k^j|` per output axis.
    pub achieved: Vec<f64>,
    /// `N · Lip_K(Ψ) · ε`.
    pub bound: f64,
}

/// Samples per axis of the bounding cube of each ball `B_k`.
const BALL_SAMPLES: usize = 9;

/// Runs the covering construction behind the null-projection property.
///
/// Each `D_i` is covered by its merged projection enlarged so that the cover
/// has total length `(|D_i| + ε)/2 < ε`. The rectangles `Q_k` are the
/// products of cover intervals that meet `D`, `B_k` is the circumscribed
/// ball, and `Ĩ_k^j` encloses the `j`-th projection of `Ψ(B_k)`: sampled
/// value ranges widened by `Lip·gap` and clipped to `Ψ(c_k) ± Lip·r_k`.
pub fn verify_null_projection(psi: &LipschitzMap, d: &BoxSet, eps: f64) -> Result<NullProjectionReport> {
    let n = d.dim();
    if n != psi.dim_in() {
        return Err(Error::Argument("map and set dimensions differ".into()));
    }
    if d.is_empty() {
        return Err(Error::Argument("box set is empty".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("epsilon must be positive, got {eps}")));
    }
    if !(d.distance_to_origin() > 0.0) {
        return Err(Error::Precondition("the origin lies in the closure of D".into()));
    }
    let (r_lo, r_hi) = psi.annulus();
    // room between D and the complement of K
    let room = d
        .boxes()
        .iter()
        .map(|b| {
            let far = b.iter().map(|&(l, h)| l.abs().max(h.abs()).powi(2)).sum::<f64>().sqrt();
            let near = b.iter().map(|&(l, h)| 0f64.clamp(l, h).powi(2)).sum::<f64>().sqrt();
            (near - r_lo).min(r_hi - far)
        })
        .fold(f64::INFINITY, f64::min);
    if !(eps < room / n as f64) {
        return Err(Error::Precondition(format!(
            "epsilon {eps} must be below dist(D, complement of K)/N = {}",
            room / n as f64
        )));
    }

    let mut covers: Vec<Vec<(f64, f64)>> = Vec::with_capacity(n);
    let mut cover_lengths = Vec::with_capacity(n);
    for axis in 1..=n {
        let proj = axis_project(d, axis)?;
        let len = cover_length(&proj);
        if !(len < eps) {
            return Err(Error::Precondition(format!(
                "|D_{axis}| = {len} is not below epsilon = {eps}"
            )));
        }
        let m = proj.intervals().len() as f64;
        let pad = 0.5 * (eps - len) / (2.0 * m);
        let cover: Vec<(f64, f64)> = proj.intervals().iter().map(|&(a, b)| (a - pad, b + pad)).collect();
        cover_lengths.push(cover.iter().map(|(a, b)| b - a).sum());
        covers.push(cover);
    }

    let mut rects: Vec<Vec<usize>> = Vec::new();
    for b in d.boxes() {
        let mut choices: Vec<Vec<usize>> = vec![Vec::new()];
        for (i, cover) in covers.iter().enumerate() {
            let hits: Vec<usize> = cover
                .iter()
                .enumerate()
                .filter(|(_, &(a, c))| a < b[i].1 && b[i].0 < c)
                .map(|(k, _)| k)
                .collect();
            choices = choices
                .into_iter()
                .flat_map(|pre| {
                    hits.iter().map(move |&k| {
                        let mut v = pre.clone();
                        v.push(k);
                        v
                    })
                })
                .collect();
        }
        for c in choices {
            if !rects.contains(&c) {
                rects.push(c);
            }
        }
    }

    let lip = psi.lip();
    let m_out = psi.dim_out();
    let per_rect: Vec<(f64, Vec<f64>)> = rects
        .par_iter()
        .map(|ks| {
            let sides: Vec<(f64, f64)> = ks.iter().enumerate().map(|(i, &k)| covers[i][k]).collect();
            let centre: Vec<f64> = sides.iter().map(|(a, b)| 0.5 * (a + b)).collect();
            let diam = norm(&sides.iter().map(|(a, b)| b - a).collect::<Vec<_>>());
            let r = 0.5 * diam;
            let pts = cube_grid(&centre, r, BALL_SAMPLES, n);
            let mut lo = vec![f64::INFINITY; m_out];
            let mut hi = vec![f64::NEG_INFINITY; m_out];
            for x in &pts {
                let y = psi.eval(x);
                for j in 0..m_out {
                    lo[j] = lo[j].min(y[j]);
                    hi[j] = hi[j].max(y[j]);
                }
            }
            let gap = (2.0 * r / (BALL_SAMPLES - 1) as f64) * (n as f64).sqrt();
            let yc = psi.eval(&centre);
            let lengths = (0..m_out)
                .map(|j| {
                    let a = (lo[j] - lip * gap).max(yc[j] - lip * r);
                    let b = (hi[j] + lip * gap).min(yc[j] + lip * r);
                    (b - a).max(0.0)
                })
                .collect();
            (diam, lengths)
        })
        .collect();

    let sum_diameters = per_rect.iter().map(|(d, _)| d).sum();
    let achieved: Vec<f64> = (0..m_out).map(|j| per_rect.iter().map(|(_, l)| l[j]).sum()).collect();
    let bound = n as f64 * lip * eps;
    if let Some(j) = achieved.iter().position(|&a| !(a < bound)) {
        return Err(Error::Construction {
            message: format!("output axis {} cover length {} reaches the bound {bound}", j + 1, achieved[j]),
            trace: achieved.iter().map(|a| a.to_string()).collect(),
        });
    }
    Ok(NullProjectionReport {
        epsilon: eps,
        lip,
        axis_cover_lengths: cover_lengths,
        rectangles: rects.len(),
        sum_diameters,
        achieved,
        bound,
    })
}

/// Grid on the cube around `c` with half-side `r`, radially clamped into the
/// closed ball of radius `r`.
fn cube_grid(c: &[f64], r: f64, m: usize, n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(m.pow(n as u32));
    let mut idx = vec![0usize; n];
    loop {
        let mut off: Vec<f64> = idx.iter().map(|&k| -r + 2.0 * r * k as f64 / (m - 1) as f64).collect();
        let len = norm(&off);
        if len > r {
            off.iter_mut().for_each(|v| *v *= r / len);
        }
        out.push(c.iter().zip(&off).map(|(a, b)| a + b).collect());
        let mut a = 0;
        while a < n {
            idx[a] += 1;
            if idx[a] < m {
                break;
            }
            idx[a] = 0;
            a += 1;
        }
        if a == n {
            return out;
        }
    }
}

/// `count` boxes with sides `side` centred on the arc `|ξ| = radius`,
/// `θ ∈ [0.1, 1.4]`, so that distinct boxes have disjoint projections.
pub fn arc_boxes(count: usize, side: f64, radius: f64) -> BoxSet {
    let boxes = (0..count)
        .map(|k| {
            let t = if count > 1 { 0.1 + 1.3 * k as f64 / (count - 1) as f64 } else { 0.75 };
            let c = [radius * t.cos(), radius * t.sin()];
            c.iter().map(|&v| (v - 0.5 * side, v + 0.5 * side)).collect()
        })
        .collect();
    BoxSet { dim: 2, boxes }
}

/// One grid level of the vector-case counterexample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleLevel {
    pub n: usize,
    /// Occupied image cells of side `1/n` times the cell volume.
    pub image_measure_estimate: f64,
    /// `(n+1)·n^{−M}`: the most cells a segment of length 1 can touch.
    pub cell_bound: f64,
}

/// Record for `Φ(x) = (x₁, 0, …, 0)` on `[0,1]ᴺ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CounterexampleRecord {
    pub n_in: usize,
    pub m_out: usize,
    pub levels: Vec<CounterexampleLevel>,
    /// Finite-difference `∂₁φ₁`, identical at every grid point.
    pub jacobian_entry: f64,
    /// Lengths of the image's projections onto each output axis.
    pub axis_projection_lengths: Vec<f64>,
}

/// The image of `Φ(x) = (x₁, 0, …, 0)` is `M`-dimensionally null while
/// `∂₁φ₁ ≡ 1`; its first axis projection is a full interval, so the
/// per-axis hypothesis fails.
pub fn jacobian_counterexample(n_in: usize, m_out: usize) -> Result<CounterexampleRecord> {
    if n_in == 0 || m_out < 2 {
        return Err(Error::Argument("need N ≥ 1 and M ≥ 2".into()));
    }
    let phi = |x: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; m_out];
        y[0] = x[0];
        y
    };
    let mut levels = Vec::new();
    let mut jac = f64::NAN;
    let mut proj = vec![0.0; m_out];
    for n in [16usize, 32, 64, 128] {
        let h = 1.0 / n as f64;
        let total = (n + 1).pow(n_in as u32);
        let mut cells = std::collections::BTreeSet::new();
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); m_out];
        let mut jmin = f64::INFINITY;
        let mut jmax = f64::NEG_INFINITY;
        for k in 0..total {
            let mut r = k;
            let x: Vec<f64> = (0..n_in)
                .map(|_| {
                    let i = r % (n + 1);
                    r /= n + 1;
                    i as f64 * h
                })
                .collect();
            let y = phi(&x);
            let cell: Vec<i64> = y.iter().map(|v| ((v / h).floor() as i64).min(n as i64 - 1)).collect();
            cells.insert(cell);
            for j in 0..m_out {
                ranges[j] = (ranges[j].0.min(y[j]), ranges[j].1.max(y[j]));
            }
            if x[0] + h <= 1.0 + 1e-12 {
                let mut xp = x.clone();
                xp[0] += h;
                let d = (phi(&xp)[0] - y[0]) / h;
                jmin = jmin.min(d);
                jmax = jmax.max(d);
            }
        }
        let vol = h.powi(m_out as i32);
        levels.push(CounterexampleLevel {
            n,
            image_measure_estimate: cells.len() as f64 * vol,
            cell_bound: (n + 1) as f64 * vol,
        });
        jac = if (jmax - jmin).abs() < 1e-12 { jmin } else { f64::NAN };
        proj = ranges.iter().map(|(a, b)| b - a).collect();
    }
    Ok(CounterexampleRecord {
        n_in,
        m_out,
        levels,
        jacobian_entry: jac,
        axis_projection_lengths: proj,
    })
}
