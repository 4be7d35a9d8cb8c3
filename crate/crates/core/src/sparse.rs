//! Minimal compressed-sparse-column matrix for the flow constraints.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Builds from per-column `(row, value)` lists. Rows within a column are
    /// sorted and duplicates summed.
    pub fn from_columns(nrows: usize, columns: Vec<Vec<(usize, f64)>>) -> Self {
        let ncols = columns.len();
        let mut col_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for mut col in columns {
            col.sort_by_key(|&(r, _)| r);
            let mut last: Option<usize> = None;
            for (r, v) in col {
                assert!(r < nrows, "row index {r} out of bounds for {nrows} rows");
                if last == Some(r) {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                    last = Some(r);
                }
            }
            col_ptr.push(row_idx.len());
        }
        Self {
            nrows,
            ncols,
            col_ptr,
            row_idx,
            values,
        }
    }

    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let columns = (0..dense.ncols())
            .map(|j| {
                (0..dense.nrows())
                    .filter(|&i| dense[(i, j)] != 0.0)
                    .map(|i| (i, dense[(i, j)]))
                    .collect()
            })
            .collect();
        Self::from_columns(dense.nrows(), columns)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(row, value)` pairs of column `j`.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[j]..self.col_ptr[j + 1];
        self.row_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    /// `out = A x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows);
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                out[self.row_idx[k]] += self.values[k] * xj;
            }
        }
    }

    /// `out = A^T y`.
    pub fn mul_t_vec(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.nrows);
        debug_assert_eq!(out.len(), self.ncols);
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.col_ptr[j]..self.col_ptr[j + 1] {
                acc += self.values[k] * y[self.row_idx[k]];
            }
            *o = acc;
        }
    }

    /// Dense `A A^T`.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.nrows, self.nrows);
        for j in 0..self.ncols {
            let range = self.col_ptr[j]..self.col_ptr[j + 1];
            for p in range.clone() {
                let (rp, vp) = (self.row_idx[p], self.values[p]);
                for q in range.clone() {
                    g[(rp, self.row_idx[q])] += vp * self.values[q];
                }
            }
        }
        g
    }

    /// Dense `A_K A_K^T` over the columns with `keep[j]` set.
    pub fn gram_masked(&self, keep: &[bool]) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.nrows, self.nrows);
        for j in (0..self.ncols).filter(|&j| keep[j]) {
            let range = self.col_ptr[j]..self.col_ptr[j + 1];
            for p in range.clone() {
                let (rp, vp) = (self.row_idx[p], self.values[p]);
                for q in range.clone() {
                    g[(rp, self.row_idx[q])] += vp * self.values[q];
                }
            }
        }
        g
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for j in 0..self.ncols {
            for (i, v) in self.column(j) {
                m[(i, j)] = v;
            }
        }
        m
    }
}
