//! Symmetric sparse matrices and a direct envelope (profile) Cholesky solver
//! with reverse Cuthill–McKee ordering.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Compressed sparse row pattern of a structurally symmetric matrix. Column
/// indices within a row are sorted and the diagonal is always present.
#[derive(Debug, Clone)]
pub struct SparsePattern {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
}

impl SparsePattern {
    /// Builds the pattern from undirected edges `(i, j)`, `i != j`.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (i, j) in edges {
            rows[i].push(j);
            rows[j].push(i);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_unstable();
            row.dedup();
            col_idx.extend(row);
            row_ptr.push(col_idx.len());
        }
        SparsePattern {
            n,
            row_ptr,
            col_idx,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    /// Storage offset of entry `(i, j)`.
    pub fn offset(&self, i: usize, j: usize) -> Option<usize> {
        let row = self.row(i);
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }
}

/// Values on a [`SparsePattern`].
#[derive(Debug, Clone)]
pub struct SymMatrix<'a> {
    pub pattern: &'a SparsePattern,
    pub values: Vec<f64>,
}

impl<'a> SymMatrix<'a> {
    pub fn zeros(pattern: &'a SparsePattern) -> Self {
        SymMatrix {
            pattern,
            values: vec![0.0; pattern.nnz()],
        }
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self
            .pattern
            .offset(i, j)
            .expect("entry outside the sparsity pattern");
        self.values[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.offset(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.pattern.n)
            .map(|i| {
                let range = self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1];
                range
                    .map(|k| self.values[k] * x[self.pattern.col_idx[k]])
                    .sum()
            })
            .collect()
    }
}

/// Reverse Cuthill–McKee permutation: `perm[new] = old`.
pub fn reverse_cuthill_mckee(pattern: &SparsePattern) -> Vec<usize> {
    let n = pattern.n();
    let degree: Vec<usize> = (0..n).map(|i| pattern.row(i).len() - 1).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize| -> (usize, Vec<usize>) {
        let mut level = vec![usize::MAX; n];
        level[start] = 0;
        let mut queue = VecDeque::from([start]);
        let mut last = vec![start];
        let mut depth = 0;
        while let Some(v) = queue.pop_front() {
            for &w in pattern.row(v) {
                if level[w] == usize::MAX {
                    level[w] = level[v] + 1;
                    if level[w] > depth {
                        depth = level[w];
                        last.clear();
                    }
                    if level[w] == depth {
                        last.push(w);
                    }
                    queue.push_back(w);
                }
            }
        }
        (depth, last)
    };

    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        // pseudo-peripheral start node
        let mut start = seed;
        let (mut depth, mut last) = bfs_levels(start);
        loop {
            let cand = *last
                .iter()
                .min_by_key(|&&v| (degree[v], v))
                .expect("nonempty level");
            let (d, l) = bfs_levels(cand);
            if d > depth {
                start = cand;
                depth = d;
                last = l;
            } else {
                break;
            }
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut nbrs = Vec::new();
        while let Some(v) = queue.pop_front() {
            order.push(v);
            nbrs.clear();
            nbrs.extend(pattern.row(v).iter().copied().filter(|&w| !visited[w]));
            nbrs.sort_by_key(|&w| (degree[w], w));
            for &w in &nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Envelope layout of the Cholesky factor for a given pattern and ordering.
#[derive(Debug, Clone)]
pub struct EnvelopeLayout {
    perm: Vec<usize>,
    inv: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    len: usize,
}

impl EnvelopeLayout {
    pub fn new(pattern: &SparsePattern) -> Self {
        let perm = reverse_cuthill_mckee(pattern);
        let n = pattern.n();
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first = vec![0; n];
        let mut start = vec![0; n + 1];
        for i in 0..n {
            let old = perm[i];
            first[i] = pattern
                .row(old)
                .iter()
                .map(|&j| inv[j])
                .min()
                .unwrap_or(i)
                .min(i);
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let len = start[n];
        EnvelopeLayout {
            perm,
            inv,
            first,
            start,
            len,
        }
    }

    pub fn n(&self) -> usize {
        self.perm.len()
    }

    /// Number of stored factor entries.
    pub fn profile(&self) -> usize {
        self.len
    }
}

/// Cholesky factor `P A Pᵀ = L Lᵀ` stored by rows within the envelope.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    layout: Arc<EnvelopeLayout>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(layout: &Arc<EnvelopeLayout>, matrix: &SymMatrix<'_>) -> Result<Self> {
        let n = layout.n();
        if matrix.pattern.n() != n {
            return Err(Error::Type("matrix and layout dimensions differ".into()));
        }
        let mut data = vec![0.0; layout.len];
        // scatter A (lower triangle, permuted) into the envelope
        for old_i in 0..n {
            let i = layout.inv[old_i];
            let range = matrix.pattern.row_ptr[old_i]..matrix.pattern.row_ptr[old_i + 1];
            for k in range {
                let j = layout.inv[matrix.pattern.col_idx[k]];
                if j <= i {
                    data[layout.start[i] + j - layout.first[i]] = matrix.values[k];
                }
            }
        }
        for i in 0..n {
            let fi = layout.first[i];
            let si = layout.start[i];
            for j in fi..i {
                let fj = layout.first[j];
                let sj = layout.start[j];
                let lo = fi.max(fj);
                let mut s = data[si + j - fi];
                let ri = &data[si + lo - fi..si + j - fi];
                let rj = &data[sj + lo - fj..sj + j - fj];
                s -= ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>();
                data[si + j - fi] = s / data[sj + j - fj];
            }
            let row = &data[si..si + i - fi];
            let d = data[si + i - fi] - row.iter().map(|a| a * a).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Domain(format!(
                    "matrix is not positive definite (pivot {d:.3e} at row {i})"
                )));
            }
            data[si + i - fi] = d.sqrt();
        }
        Ok(EnvelopeCholesky {
            layout: Arc::clone(layout),
            data,
        })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let l = &*self.layout;
        let n = l.n();
        let mut y: Vec<f64> = (0..n).map(|i| b[l.perm[i]]).collect();
        for i in 0..n {
            let fi = l.first[i];
            let si = l.start[i];
            let row = &self.data[si..si + i - fi];
            let s: f64 = row.iter().zip(&y[fi..i]).map(|(a, b)| a * b).sum();
            y[i] = (y[i] - s) / self.data[si + i - fi];
        }
        for i in (0..n).rev() {
            let fi = l.first[i];
            let si = l.start[i];
            y[i] /= self.data[si + i - fi];
            let yi = y[i];
            for (k, a) in (fi..i).zip(&self.data[si..si + i - fi]) {
                y[k] -= a * yi;
            }
        }
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[l.perm[i]] = y[i];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn grid_laplacian(m: usize) -> (SparsePattern, Vec<(usize, usize, f64)>) {
        let idx = |i: usize, j: usize| i * m + j;
        let mut edges = Vec::new();
        let mut entries = Vec::new();
        for i in 0..m {
            for j in 0..m {
                entries.push((idx(i, j), idx(i, j), 4.0 + 0.1 * (i + j) as f64));
                if i + 1 < m {
                    edges.push((idx(i, j), idx(i + 1, j)));
                    entries.push((idx(i, j), idx(i + 1, j), -1.0));
                }
                if j + 1 < m {
                    edges.push((idx(i, j), idx(i, j + 1)));
                    entries.push((idx(i, j), idx(i, j + 1), -1.0));
                }
            }
        }
        (SparsePattern::from_edges(m * m, edges), entries)
    }

    #[test]
    fn envelope_cholesky_matches_dense_solve() {
        let m = 9;
        let (pattern, entries) = grid_laplacian(m);
        let mut a = SymMatrix::zeros(&pattern);
        let mut dense = DMatrix::zeros(m * m, m * m);
        for &(i, j, v) in &entries {
            a.add(i, j, v);
            dense[(i, j)] += v;
            if i != j {
                a.add(j, i, v);
                dense[(j, i)] += v;
            }
        }
        let b: Vec<f64> = (0..m * m).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
        let layout = Arc::new(EnvelopeLayout::new(&pattern));
        let chol = EnvelopeCholesky::factor(&layout, &a).unwrap();
        let x = chol.solve(&b);
        let reference = dense.cholesky().unwrap().solve(&DVector::from_vec(b.clone()));
        for i in 0..m * m {
            assert!((x[i] - reference[i]).abs() < 1e-12);
        }
        let r = a.mul_vec(&x);
        for i in 0..m * m {
            assert!((r[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rcm_is_a_permutation_with_small_profile() {
        let (pattern, _) = grid_laplacian(12);
        let perm = reverse_cuthill_mckee(&pattern);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..144).collect::<Vec<_>>());
        let layout = EnvelopeLayout::new(&pattern);
        // banded profile is about n * (m + 1)
        assert!(layout.profile() <= 144 * 14);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let pattern = SparsePattern::from_edges(2, [(0, 1)]);
        let mut a = SymMatrix::zeros(&pattern);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(0, 1, 2.0);
        a.add(1, 0, 2.0);
        let layout = Arc::new(EnvelopeLayout::new(&pattern));
        assert!(EnvelopeCholesky::factor(&layout, &a).is_err());
    }
}
