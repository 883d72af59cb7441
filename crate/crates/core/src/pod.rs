//! Snapshot storage and proper orthogonal decomposition.
//!
//! The modes are those of the correlation eigenproblem `S^T S V = V Lambda`,
//! `C = S V Lambda^-1/2`, computed through a thin SVD of `S` so that modes
//! down to `1e-10` of the leading singular value stay resolved.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues at or below this fraction of the largest one (singular values
/// below `1e-10` of the largest) are treated as numerically zero and never
/// selected.
pub const RANK_CUTOFF: f64 = 1e-20;

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    columns: DMatrix<f64>,
    labels: Vec<String>,
}

impl SnapshotMatrix {
    pub fn new(n_rows: usize) -> Self {
        Self {
            columns: DMatrix::zeros(n_rows, 0),
            labels: Vec::new(),
        }
    }

    pub fn from_matrix(columns: DMatrix<f64>, labels: Vec<String>) -> Result<Self> {
        if labels.len() != columns.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} snapshot columns",
                labels.len(),
                columns.ncols()
            )));
        }
        Ok(Self { columns, labels })
    }

    /// Columns labelled by their index.
    pub fn from_columns(columns: DMatrix<f64>) -> Self {
        let labels = (0..columns.ncols()).map(|i| i.to_string()).collect();
        Self { columns, labels }
    }

    pub fn push(&mut self, v: &DVector<f64>, label: impl Into<String>) -> Result<()> {
        if v.len() != self.columns.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "snapshot of length {} for {} rows",
                v.len(),
                self.columns.nrows()
            )));
        }
        let n = self.columns.ncols();
        self.columns = std::mem::take(&mut self.columns).insert_column(n, 0.0);
        self.columns.set_column(n, v);
        self.labels.push(label.into());
        Ok(())
    }

    pub fn extend(&mut self, other: &SnapshotMatrix) -> Result<()> {
        for (j, label) in other.labels.iter().enumerate() {
            self.push(&other.columns.column(j).into_owned(), label.clone())?;
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.columns.nrows()
    }

    pub fn n_snapshots(&self) -> usize {
        self.columns.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Keep the `n` leading modes (fewer if the snapshot rank is lower).
    Order(usize),
    /// Keep modes with `lambda_i / lambda_max > eps`.
    Ratio(f64),
    /// Keep every mode above the rank cutoff.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    c: DMatrix<f64>,
    lambdas: Vec<f64>,
}

impl ReducedBasis {
    /// Orthonormalizes the given columns, dropping dependent ones. The
    /// spectrum is left empty.
    pub fn from_columns(columns: &DMatrix<f64>) -> Self {
        Self {
            c: orthonormalize(columns),
            lambdas: Vec::new(),
        }
    }

    pub fn empty(n_rows: usize) -> Self {
        Self {
            c: DMatrix::zeros(n_rows, 0),
            lambdas: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.c.nrows()
    }

    pub fn n_c(&self) -> usize {
        self.c.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Eigenvalues of `S^T S` in descending order, one per snapshot.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// `max |C^T C - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.c.transpose() * &self.c;
        (&g - DMatrix::identity(g.nrows(), g.ncols())).amax()
    }

    /// Appends the normalized component of `v` orthogonal to the basis.
    /// Returns false (and leaves the basis unchanged) when that component is
    /// below `rel_tol * |v|`.
    pub fn append_orthogonal(&mut self, v: &DVector<f64>, rel_tol: f64) -> bool {
        let norm = v.norm();
        if norm == 0.0 {
            return false;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            let coords = self.c.tr_mul(&w);
            w -= &self.c * coords;
        }
        let wn = w.norm();
        if wn <= rel_tol * norm {
            return false;
        }
        let n = self.c.ncols();
        self.c = std::mem::take(&mut self.c).insert_column(n, 0.0);
        self.c.set_column(n, &(w / wn));
        true
    }
}

/// Modified Gram-Schmidt with one re-orthogonalization pass; columns whose
/// remaining norm falls below `1e-10` of their original norm are dropped.
pub fn orthonormalize(columns: &DMatrix<f64>) -> DMatrix<f64> {
    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(columns.ncols());
    for j in 0..columns.ncols() {
        let mut w = columns.column(j).into_owned();
        let norm0 = w.norm();
        if norm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &kept {
                let p = q.dot(&w);
                w.axpy(-p, q, 1.0);
            }
        }
        let n = w.norm();
        if n > 1e-10 * norm0 {
            kept.push(w / n);
        }
    }
    if kept.is_empty() {
        DMatrix::zeros(columns.nrows(), 0)
    } else {
        DMatrix::from_columns(&kept)
    }
}

/// Eigenvalues of `S^T S` in descending order, one per snapshot, and the
/// matching left singular vectors `S V^i / sqrt(lambda_i)` of the nonzero ones.
fn snapshot_spectrum(s: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let svd = s.clone().svd(true, false);
    let u = svd.u.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut lambdas: Vec<f64> = order
        .iter()
        .map(|&i| svd.singular_values[i].powi(2))
        .collect();
    lambdas.resize(s.ncols(), 0.0);
    let modes = DMatrix::from_fn(s.nrows(), order.len(), |r, c| u[(r, order[c])]);
    (lambdas, modes)
}

/// POD basis `C^i = lambda_i^{-1/2} S V^i` from the eigenpairs of `S^T S`,
/// restricted to the selected modes.
pub fn compute_pod_basis(s: &SnapshotMatrix, truncation: Truncation) -> Result<ReducedBasis> {
    let m = s.matrix();
    if m.ncols() == 0 || m.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroSnapshot);
    }
    let (lambdas, modes) = snapshot_spectrum(m);
    let lmax = lambdas[0];
    let rank = lambdas
        .iter()
        .take_while(|&&l| l > RANK_CUTOFF * lmax)
        .count();
    let n_c = match truncation {
        Truncation::Order(n) => n.min(rank),
        Truncation::Ratio(eps) => lambdas
            .iter()
            .take(rank)
            .take_while(|&&l| l / lmax > eps)
            .count(),
        Truncation::Full => rank,
    };
    let c = orthonormalize(&modes.columns(0, n_c).into_owned());
    Ok(ReducedBasis { c, lambdas })
}

/// `sqrt(sum_{i > n_c} lambda_i / sum_i lambda_i)`.
pub fn svd_truncation_error(basis: &ReducedBasis, s: &SnapshotMatrix) -> f64 {
    let lambdas = if basis.lambdas.len() == s.n_snapshots() {
        basis.lambdas.clone()
    } else {
        snapshot_spectrum(s.matrix()).0
    };
    let total: f64 = lambdas.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let tail: f64 = lambdas.iter().skip(basis.n_c()).sum();
    (tail / total).max(0.0).sqrt()
}

/// Coordinates `C^T v` and the norm of the part of `v` outside the basis.
pub fn project(basis: &ReducedBasis, v: &DVector<f64>) -> (DVector<f64>, f64) {
    let coords = basis.c.tr_mul(v);
    let residual = (v - &basis.c * &coords).norm();
    (coords, residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn e(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    #[test]
    fn single_snapshot_basis() {
        let s = DVector::from_vec(vec![3.0, 0.0, 4.0]);
        let snaps = SnapshotMatrix::from_columns(DMatrix::from_columns(std::slice::from_ref(&s)));
        let b = compute_pod_basis(&snaps, Truncation::Full).unwrap();
        assert_eq!(b.n_c(), 1);
        assert_relative_eq!(b.lambdas()[0], 25.0, epsilon = 1e-12);
        let c = b.matrix().column(0).into_owned();
        assert!((c.clone() - &s / 5.0).norm() < 1e-14 || (c + &s / 5.0).norm() < 1e-14);
    }

    #[test]
    fn two_scaled_axes() {
        let snaps = SnapshotMatrix::from_columns(DMatrix::from_columns(&[2.0 * e(3, 0), e(3, 1)]));
        let b = compute_pod_basis(&snaps, Truncation::Full).unwrap();
        assert_relative_eq!(b.lambdas()[0], 4.0, epsilon = 1e-14);
        assert_relative_eq!(b.lambdas()[1], 1.0, epsilon = 1e-14);
        assert_relative_eq!(b.matrix()[(0, 0)].abs(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(b.matrix()[(1, 1)].abs(), 1.0, epsilon = 1e-14);

        let b1 = compute_pod_basis(&snaps, Truncation::Order(1)).unwrap();
        assert_relative_eq!(
            svd_truncation_error(&b1, &snaps),
            (0.2f64).sqrt(),
            epsilon = 1e-14
        );
        assert_eq!(svd_truncation_error(&b, &snaps), 0.0);
    }

    #[test]
    fn duplicated_column_is_rank_one() {
        let s = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let snaps = SnapshotMatrix::from_columns(DMatrix::from_columns(&[s.clone(), s]));
        let b = compute_pod_basis(&snaps, Truncation::Order(2)).unwrap();
        assert_eq!(b.n_c(), 1);
        assert!(b.lambdas()[1].abs() < 1e-12 * b.lambdas()[0]);
    }

    #[test]
    fn zero_snapshot_is_an_error() {
        let snaps = SnapshotMatrix::from_columns(DMatrix::zeros(4, 2));
        assert!(matches!(
            compute_pod_basis(&snaps, Truncation::Full),
            Err(Error::ZeroSnapshot)
        ));
    }

    #[test]
    fn ratio_truncation() {
        let snaps = SnapshotMatrix::from_columns(DMatrix::from_columns(&[
            10.0 * e(3, 0),
            e(3, 1),
            0.01 * e(3, 2),
        ]));
        let b = compute_pod_basis(&snaps, Truncation::Ratio(1e-3)).unwrap();
        assert_eq!(b.n_c(), 2);
    }

    #[test]
    fn projection_examples() {
        let b = ReducedBasis::from_columns(&DMatrix::from_columns(&[e(4, 0), e(4, 1)]));
        let (coords, r) = project(&b, &e(4, 0));
        assert_eq!(coords.as_slice(), &[1.0, 0.0]);
        assert_eq!(r, 0.0);
        let (coords, r) = project(&b, &(2.0 * e(4, 2)));
        assert_eq!(coords.norm(), 0.0);
        assert_relative_eq!(r, 2.0);
        let (_, r) = project(&b, &(3.0 * e(4, 0) + 4.0 * e(4, 3)));
        assert_relative_eq!(r, 4.0, epsilon = 1e-15);
    }

    #[test]
    fn append_orthogonal_rejects_span_members() {
        let mut b = ReducedBasis::from_columns(&DMatrix::from_columns(&[e(3, 0)]));
        assert!(!b.append_orthogonal(&(5.0 * e(3, 0)), 1e-12));
        assert!(b.append_orthogonal(&(e(3, 0) + e(3, 2)), 1e-12));
        assert_eq!(b.n_c(), 2);
        assert!(b.orthonormality_error() < 1e-15);
    }

    fn direct_j(b: &ReducedBasis, s: &DMatrix<f64>) -> f64 {
        let c = b.matrix();
        (0..s.ncols())
            .map(|j| {
                let sj = s.column(j);
                (sj - c * (c.transpose() * sj)).norm_squared()
            })
            .sum()
    }

    proptest! {
        #[test]
        fn spectral_identities(
            n_u in 2usize..20,
            n_s in 1usize..7,
            seed in prop::collection::vec(-1.0f64..1.0, 20 * 7),
        ) {
            let s = DMatrix::from_fn(n_u, n_s, |i, j| seed[i * 7 + j]);
            prop_assume!(s.norm() > 1e-3);
            let snaps = SnapshotMatrix::from_columns(s.clone());
            let full = compute_pod_basis(&snaps, Truncation::Full).unwrap();
            let total: f64 = full.lambdas().iter().sum();
            prop_assert!((total - s.norm_squared()).abs() <= 1e-10 * s.norm_squared());
            let mut previous = vec![f64::INFINITY; n_s];
            for n_c in 0..=n_s {
                let b = compute_pod_basis(&snaps, Truncation::Order(n_c)).unwrap();
                prop_assert!(b.orthonormality_error() < 1e-10);
                let tail: f64 = b.lambdas().iter().skip(b.n_c()).sum();
                let j = direct_j(&b, &s);
                prop_assert!((j - tail).abs() <= 1e-10 * total);
                let nu = svd_truncation_error(&b, &snaps);
                prop_assert!((nu * nu - j / total).abs() <= 1e-10);
                for col in 0..n_s {
                    let (_, r) = project(&b, &s.column(col).into_owned());
                    prop_assert!(r <= previous[col] + 1e-12);
                    previous[col] = r;
                }
            }
        }
    }
}
