//! Compressed sparse row storage for the assembled lattice operators.
//!
//! Both triangles are stored. Column indices are sorted within each row so
//! that entry lookup is a binary search and all products run in a fixed
//! summation order.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix with the given sparsity pattern. Each row's column list is
    /// sorted and deduplicated; the diagonal is always present.
    pub fn from_pattern(n: usize, rows: &[Vec<usize>]) -> Self {
        assert_eq!(rows.len(), n);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for (i, row) in rows.iter().enumerate() {
            let mut cols = row.clone();
            cols.push(i);
            cols.sort_unstable();
            cols.dedup();
            col_idx.extend(cols);
            row_ptr.push(col_idx.len());
        }
        let values = vec![0.0; col_idx.len()];
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let rows: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..n).filter(|&j| a[(i, j)] != 0.0).collect())
            .collect();
        let mut m = Self::from_pattern(n, &rows);
        for i in 0..n {
            for p in m.row_ptr[i]..m.row_ptr[i + 1] {
                m.values[p] = a[(i, m.col_idx[p])];
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |p| (self.col_idx[p], self.values[p]))
    }

    /// Storage slot of entry (i, j), if it belongs to the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        cols.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |p| self.values[p])
    }

    pub fn clear(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.n, (0..self.n).map(|i| self.get(i, i)))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.n);
        DVector::from_iterator(
            self.n,
            (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum::<f64>()),
        )
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n);
        let mut y = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            let col = x.column(c);
            for i in 0..self.n {
                y[(i, c)] = self.row(i).map(|(j, v)| v * col[j]).sum::<f64>();
            }
        }
        y
    }

    /// Principal submatrix on the given (sorted) index set, renumbered
    /// 0..idx.len().
    pub fn submatrix(&self, idx: &[usize]) -> CsrMatrix {
        let mut local = vec![usize::MAX; self.n];
        for (k, &i) in idx.iter().enumerate() {
            local[i] = k;
        }
        let rows: Vec<Vec<usize>> = idx
            .iter()
            .map(|&i| {
                self.row(i)
                    .filter_map(|(j, _)| (local[j] != usize::MAX).then_some(local[j]))
                    .collect()
            })
            .collect();
        let mut sub = CsrMatrix::from_pattern(idx.len(), &rows);
        for (k, &i) in idx.iter().enumerate() {
            for (j, v) in self.row(i) {
                if local[j] != usize::MAX {
                    let p = sub.position(k, local[j]).expect("pattern entry");
                    sub.values[p] += v;
                }
            }
        }
        sub
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                a[(i, j)] += v;
            }
        }
        a
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Largest absolute asymmetry |a_ij - a_ji|.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }
}
