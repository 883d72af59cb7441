//! Direct solver for the full-order tangent systems: reverse Cuthill-McKee
//! reordering followed by a skyline (variable band) LDL^T factorization.
//!
//! No pivoting is performed, so symmetric indefinite matrices are accepted as
//! long as no pivot vanishes. The number of negative pivots is the inertia
//! count used to tell whether the factored operator is positive definite.

use std::collections::VecDeque;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Relative pivot threshold below which the matrix is declared singular.
const PIVOT_TOL: f64 = 1e-13;

/// Reverse Cuthill-McKee permutation (`perm[new] = old`) of the matrix graph.
pub fn rcm_order(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let degree: Vec<usize> = (0..n)
        .map(|i| a.row(i).filter(|&(j, _)| j != i).count())
        .collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    while order.len() < n {
        // lowest-degree unvisited vertex seeds the next component
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .expect("unvisited vertex");
        let root = pseudo_peripheral(a, seed, &degree);
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = a.row(v).map(|(j, _)| j).filter(|&j| !visited[j]).collect();
            nbrs.sort_by_key(|&j| (degree[j], j));
            for j in nbrs {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(a: &CsrMatrix, root: usize) -> Vec<Option<usize>> {
    let mut level = vec![None; a.nrows()];
    level[root] = Some(0);
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        let lv = level[v].unwrap();
        for (j, _) in a.row(v) {
            if level[j].is_none() {
                level[j] = Some(lv + 1);
                queue.push_back(j);
            }
        }
    }
    level
}

fn pseudo_peripheral(a: &CsrMatrix, seed: usize, degree: &[usize]) -> usize {
    let mut root = seed;
    let mut ecc = 0;
    for _ in 0..8 {
        let level = bfs_levels(a, root);
        let depth = level.iter().flatten().copied().max().unwrap_or(0);
        if depth <= ecc && root != seed {
            break;
        }
        ecc = depth;
        let candidate = (0..a.nrows())
            .filter(|&i| level[i] == Some(depth))
            .min_by_key(|&i| (degree[i], i))
            .unwrap_or(root);
        if candidate == root {
            break;
        }
        root = candidate;
    }
    root
}

/// Skyline LDL^T factors of a symmetric matrix under a fixed ordering.
#[derive(Debug, Clone)]
pub struct SkylineLdlt {
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    l: Vec<f64>,
    d: Vec<f64>,
    negative_pivots: usize,
}

impl SkylineLdlt {
    /// Factors `a` after computing a fresh RCM ordering.
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let perm = rcm_order(a);
        Self::factor_with_order(a, perm)
    }

    /// Factors `a` with the given permutation (`perm[new] = old`).
    pub fn factor_with_order(a: &CsrMatrix, perm: Vec<usize>) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(perm.len(), n);
        let mut iperm = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        let mut first: Vec<usize> = (0..n).collect();
        for (new, &old) in perm.iter().enumerate() {
            for (j, _) in a.row(old) {
                let jn = iperm[j];
                if jn < first[new] {
                    first[new] = jn;
                }
            }
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + i - first[i] + 1);
        }
        let mut l = vec![0.0; start[n]];
        for (new, &old) in perm.iter().enumerate() {
            for (j, v) in a.row(old) {
                let jn = iperm[j];
                if jn <= new {
                    l[start[new] + jn - first[new]] += v;
                }
            }
        }

        let scale = (0..n)
            .map(|i| a.get(i, i).abs())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let mut d = vec![0.0; n];
        let mut negative_pivots = 0;
        for i in 0..n {
            let fi = first[i];
            let si = start[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let sj = start[j];
                let mut s = l[si + j - fi];
                for k in k0..j {
                    s -= l[si + k - fi] * l[sj + k - fj];
                }
                l[si + j - fi] = s;
            }
            let mut dsum = 0.0;
            for j in fi..i {
                let g = l[si + j - fi];
                let lij = g / d[j];
                dsum += g * lij;
                l[si + j - fi] = lij;
            }
            let di = l[si + i - fi] - dsum;
            if !(di.abs() > PIVOT_TOL * scale) {
                return Err(Error::SingularTangent {
                    row: perm[i],
                    pivot: di,
                });
            }
            if di < 0.0 {
                negative_pivots += 1;
            }
            d[i] = di;
            l[si + i - fi] = 1.0;
        }

        Ok(Self {
            perm,
            first,
            start,
            l,
            d,
            negative_pivots,
        })
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn negative_pivots(&self) -> usize {
        self.negative_pivots
    }

    pub fn is_positive_definite(&self) -> bool {
        self.negative_pivots == 0
    }

    /// Profile size (number of stored lower-triangle entries).
    pub fn profile(&self) -> usize {
        self.l.len()
    }

    pub fn ordering(&self) -> &[usize] {
        &self.perm
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| b[old]).collect();
        // L y = b
        for i in 0..n {
            let fi = self.first[i];
            let si = self.start[i];
            let mut s = y[i];
            for k in fi..i {
                s -= self.l[si + k - fi] * y[k];
            }
            y[i] = s;
        }
        for i in 0..n {
            y[i] /= self.d[i];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let fi = self.first[i];
            let si = self.start[i];
            let yi = y[i];
            for k in fi..i {
                y[k] -= self.l[si + k - fi] * yi;
            }
        }
        let mut x = DVector::zeros(n);
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}
