//! Compressed sparse row matrices and the normalized propagation operator.
//!
//! The adjacency structure of a graph is kept in CSR form with unit values;
//! the propagation operator reuses the same storage with real weights. Row
//! entries are always sorted by column index and each row is reduced
//! sequentially, so products are deterministic regardless of thread count.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Sparse real matrix in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub nrows: usize,
    pub ncols: usize,
    /// `row_ptr[i]..row_ptr[i+1]` indexes the entries of row `i`.
    pub row_ptr: Vec<usize>,
    /// Column indices, sorted within each row, no duplicates.
    pub col_idx: Vec<u32>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[span.clone()], &self.values[span])
    }

    /// Number of stored entries in row `i`.
    pub fn row_degree(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    /// Builds a symmetric 0/1 adjacency matrix from an undirected edge list.
    /// Both directions are stored, duplicate edges and self-loops dropped.
    pub fn adjacency_from_edges(n: usize, edges: &[(u32, u32)]) -> CsrMatrix {
        let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u == v {
                continue;
            }
            neighbors[u as usize].push(v);
            neighbors[v as usize].push(u);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for nbrs in &mut neighbors {
            nbrs.sort_unstable();
            nbrs.dedup();
            col_idx.extend_from_slice(nbrs);
            row_ptr.push(col_idx.len());
        }
        let values = vec![1.0; col_idx.len()];
        CsrMatrix {
            nrows: n,
            ncols: n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// CSR of an arbitrary dense matrix, keeping only nonzero entries.
    /// Used to exploit sparsity of bag-of-words feature matrices.
    pub fn from_dense(m: &ArrayView2<f64>) -> CsrMatrix {
        let (nrows, ncols) = m.dim();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in m.rows() {
            for (j, &x) in row.iter().enumerate() {
                if x != 0.0 {
                    col_idx.push(j as u32);
                    values.push(x);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[(i, j as usize)] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.ncols];
        for &j in &self.col_idx {
            counts[j as usize] += 1;
        }
        let mut row_ptr = Vec::with_capacity(self.ncols + 1);
        row_ptr.push(0);
        for c in &counts {
            row_ptr.push(row_ptr.last().unwrap() + c);
        }
        let mut cursor = row_ptr[..self.ncols].to_vec();
        let mut col_idx = vec![0u32; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let slot = cursor[j as usize];
                col_idx[slot] = i as u32;
                values[slot] = v;
                cursor[j as usize] += 1;
            }
        }
        CsrMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `self · m` for dense `m`. Rows are computed in parallel; the reduction
    /// within a row is sequential in column order, so the result does not
    /// depend on the number of threads.
    pub fn matmul_dense(&self, m: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if m.nrows() != self.ncols {
            return Err(Error::DimensionMismatch(format!(
                "sparse ({}x{}) · dense ({}x{})",
                self.nrows,
                self.ncols,
                m.nrows(),
                m.ncols()
            )));
        }
        let k = m.ncols();
        let mut out = Array2::<f64>::zeros((self.nrows, k));
        let m = m.as_standard_layout();
        let m_slice = m.as_slice().expect("standard layout");
        out.axis_iter_mut(ndarray::Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut out_row)| {
                let (cols, vals) = self.row(i);
                let out_slice = out_row.as_slice_mut().expect("contiguous row");
                for (&j, &v) in cols.iter().zip(vals) {
                    let src = &m_slice[j as usize * k..(j as usize + 1) * k];
                    for (o, &s) in out_slice.iter_mut().zip(src) {
                        *o += v * s;
                    }
                }
            });
        Ok(out)
    }
}

/// Normalization scheme baked into a propagation operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// D̂^{-1/2} (A + I) D̂^{-1/2} with D̂ the degree matrix of A + I.
    SymmetricWithSelfLoops,
}

/// Sparse propagation operator shared by message passing and tokenization.
#[derive(Debug, Clone)]
pub struct SparseOperator {
    pub matrix: CsrMatrix,
    pub normalization: Normalization,
}

impl SparseOperator {
    pub fn num_nodes(&self) -> usize {
        self.matrix.nrows
    }

    /// Applies the operator to a dense matrix. The operator is symmetric by
    /// construction, so this also serves as the transpose application in
    /// backward passes.
    pub fn apply(&self, m: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.matrix.matmul_dense(m)
    }
}

/// Builds the symmetric normalized operator D̂^{-1/2}(A+I)D̂^{-1/2} from a
/// symmetric adjacency matrix without self-loops. Every node receives a
/// self-loop, so isolated nodes keep a well-defined (identity) row.
pub fn build_propagation_operator(adjacency: &CsrMatrix) -> SparseOperator {
    let n = adjacency.nrows;
    let deg_hat: Vec<f64> = (0..n)
        .map(|i| (adjacency.row_degree(i) + 1) as f64)
        .collect();
    // One rounding per entry keeps perfect-square products exact and the
    // matrix symmetric bit-for-bit (the product commutes).
    let weight = |i: usize, j: usize| 1.0 / (deg_hat[i] * deg_hat[j]).sqrt();

    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut col_idx = Vec::with_capacity(adjacency.nnz() + n);
    let mut values = Vec::with_capacity(adjacency.nnz() + n);
    row_ptr.push(0);
    for i in 0..n {
        let (cols, _) = adjacency.row(i);
        // Merge the self-loop into the sorted neighbor list.
        let mut inserted = false;
        for &j in cols {
            if !inserted && (j as usize) > i {
                col_idx.push(i as u32);
                values.push(weight(i, i));
                inserted = true;
            }
            col_idx.push(j);
            values.push(weight(i, j as usize));
        }
        if !inserted {
            col_idx.push(i as u32);
            values.push(weight(i, i));
        }
        row_ptr.push(col_idx.len());
    }

    SparseOperator {
        matrix: CsrMatrix {
            nrows: n,
            ncols: n,
            row_ptr,
            col_idx,
            values,
        },
        normalization: Normalization::SymmetricWithSelfLoops,
    }
}
