//! CSR sparsity patterns and edge-weighted sparse matrices.
//!
//! Patterns are symmetric (undirected graphs); the transpose of a weighted
//! matrix is therefore a permutation of its edge values, precomputed at
//! pattern construction.

use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePattern {
    n: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    /// For entry e at (i,j), `transpose_perm[e]` is the entry index of (j,i).
    transpose_perm: Vec<usize>,
}

impl SparsePattern {
    /// Build from per-row sorted adjacency lists. The pattern must be
    /// symmetric: (i,j) present iff (j,i) present.
    pub fn from_adjacency(adj: &[Vec<usize>]) -> Result<Self> {
        let n = adj.len();
        let mut row_offsets = Vec::with_capacity(n + 1);
        let mut col_indices = Vec::new();
        row_offsets.push(0);
        for (i, nbrs) in adj.iter().enumerate() {
            for (k, &j) in nbrs.iter().enumerate() {
                if j >= n {
                    return Err(Error::data(format!("column index {} out of range", j)));
                }
                if k > 0 && nbrs[k - 1] >= j {
                    return Err(Error::data(format!("row {}: columns not strictly sorted", i)));
                }
                col_indices.push(j);
            }
            row_offsets.push(col_indices.len());
        }
        let transpose_perm = compute_transpose_perm(n, &row_offsets, &col_indices)?;
        Ok(SparsePattern { n, row_offsets, col_indices, transpose_perm })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_offsets[i]..self.row_offsets[i + 1]
    }

    /// Sorted column indices of row `i`.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.col_indices[self.row_range(i)]
    }

    pub fn transpose_perm(&self) -> &[usize] {
        &self.transpose_perm
    }

    /// Entry index of (i,j), if present.
    pub fn entry_index(&self, i: usize, j: usize) -> Option<usize> {
        let range = self.row_range(i);
        self.col_indices[range.clone()]
            .binary_search(&j)
            .ok()
            .map(|k| range.start + k)
    }

    pub fn has_entry(&self, i: usize, j: usize) -> bool {
        self.entry_index(i, j).is_some()
    }

    /// (row, col) of every stored entry, in storage order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.neighbors(i).iter().map(move |&j| (i, j)))
    }
}

fn compute_transpose_perm(
    n: usize,
    row_offsets: &[usize],
    col_indices: &[usize],
) -> Result<Vec<usize>> {
    let nnz = col_indices.len();
    let mut perm = vec![usize::MAX; nnz];
    for i in 0..n {
        for e in row_offsets[i]..row_offsets[i + 1] {
            let j = col_indices[e];
            let range = row_offsets[j]..row_offsets[j + 1];
            let k = col_indices[range.clone()]
                .binary_search(&i)
                .map_err(|_| Error::data(format!("pattern not symmetric: ({},{}) has no mirror", i, j)))?;
            perm[e] = range.start + k;
        }
    }
    Ok(perm)
}

/// A sparse matrix: shared pattern plus one value per stored entry.
#[derive(Debug, Clone)]
pub struct SparseWeighted {
    pub pattern: Rc<SparsePattern>,
    pub edge_values: Vec<f64>,
}

impl SparseWeighted {
    pub fn new(pattern: Rc<SparsePattern>, edge_values: Vec<f64>) -> Result<Self> {
        if edge_values.len() != pattern.nnz() {
            return Err(Error::shape(format!(
                "edge values {} != nnz {}",
                edge_values.len(),
                pattern.nnz()
            )));
        }
        if !edge_values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("edge value".into()));
        }
        Ok(SparseWeighted { pattern, edge_values })
    }

    /// Materialize as a dense n x n matrix.
    pub fn to_dense(&self) -> super::DenseMatrix {
        let n = self.pattern.n();
        let mut out = super::DenseMatrix::zeros(n, n);
        for (e, (i, j)) in self.pattern.entries().enumerate() {
            out.set(i, j, self.edge_values[e]);
        }
        out
    }
}
