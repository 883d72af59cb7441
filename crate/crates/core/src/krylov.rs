//! Two-level solution of the linearized local/global systems
//!
//! ```text
//! [ K_rr  K_rf ] [ d_alpha ]   [ b_r ]
//! [ K_fr  K_ff ] [ d_U_f   ] = [ b_f ]
//! ```
//!
//! by condensation on the master (`f`) unknowns, a coarse solve in the span
//! of the basis restricted to those unknowns, a conjugate gradient kept
//! `S_P`-orthogonal to that span, and back-substitution for `d_alpha`.
//! The Newton drivers pass `b = -R_R`.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Above this many master unknowns the Schur complement is only applied,
/// never formed.
pub const EXPLICIT_SCHUR_LIMIT: usize = 2000;
/// Relative eigenvalue threshold of the normalized coarse Gram matrix.
pub const COARSE_RANK_TOL: f64 = 1e-10;

/// Blocks of `A^T K_T A`. `K_fr` is the transpose of `krf` and is never stored.
#[derive(Debug, Clone)]
pub struct ReducedBlocks {
    pub krr: DMatrix<f64>,
    pub krf: DMatrix<f64>,
    pub kff: CsrMatrix,
}

impl ReducedBlocks {
    pub fn n_c(&self) -> usize {
        self.krr.nrows()
    }

    pub fn n_f(&self) -> usize {
        self.kff.nrows()
    }

    /// Dense assembly of the whole block matrix (for checks and small cases).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (nc, nf) = (self.n_c(), self.n_f());
        let mut k = DMatrix::zeros(nc + nf, nc + nf);
        k.view_mut((0, 0), (nc, nc)).copy_from(&self.krr);
        k.view_mut((0, nc), (nc, nf)).copy_from(&self.krf);
        k.view_mut((nc, 0), (nf, nc))
            .copy_from(&self.krf.transpose());
        k.view_mut((nc, nc), (nf, nf))
            .copy_from(&self.kff.to_dense());
        k
    }
}

#[derive(Debug, Clone)]
enum DenseFactor {
    Cholesky(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

impl DenseFactor {
    fn new(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 {
            return Ok(DenseFactor::Lu(LU::new(a.clone())));
        }
        if let Some(c) = Cholesky::new(a.clone()) {
            return Ok(DenseFactor::Cholesky(c));
        }
        // indefinite reduced tangents occur past the limit point
        let lu = LU::new(a.clone());
        let u = lu.u();
        let scale = a.amax();
        let smallest = (0..u.nrows())
            .map(|i| u[(i, i)].abs())
            .fold(f64::INFINITY, f64::min);
        if !(smallest > 1e-13 * scale) {
            return Err(Error::SingularKrr);
        }
        Ok(DenseFactor::Lu(lu))
    }

    fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        if b.nrows() == 0 {
            return b.clone();
        }
        match self {
            DenseFactor::Cholesky(c) => c.solve(b),
            DenseFactor::Lu(l) => l.solve(b).expect("checked non-singular"),
        }
    }

    fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        if b.is_empty() {
            return b.clone();
        }
        match self {
            DenseFactor::Cholesky(c) => c.solve(b),
            DenseFactor::Lu(l) => l.solve(b).expect("checked non-singular"),
        }
    }
}

#[derive(Debug, Clone)]
enum Schur {
    Explicit(DMatrix<f64>),
    /// `K_ff x - K_rf^T (K_rr^-1 (K_rf x))`
    Implicit {
        kff: CsrMatrix,
        krf: DMatrix<f64>,
    },
}

/// Condensed operator `S_P = K_ff - K_fr K_rr^-1 K_rf` and right-hand side
/// `R_C = b_f - K_fr K_rr^-1 b_r`.
#[derive(Debug, Clone)]
pub struct CondensedSystem {
    schur: Schur,
    krr: DenseFactor,
    krf: DMatrix<f64>,
    /// `K_rr^-1 K_rf`
    krr_inv_krf: DMatrix<f64>,
    pub rc: DVector<f64>,
}

pub fn condense(
    blocks: &ReducedBlocks,
    b_r: &DVector<f64>,
    b_f: &DVector<f64>,
) -> Result<CondensedSystem> {
    condense_with_limit(blocks, b_r, b_f, EXPLICIT_SCHUR_LIMIT)
}

pub fn condense_with_limit(
    blocks: &ReducedBlocks,
    b_r: &DVector<f64>,
    b_f: &DVector<f64>,
    explicit_limit: usize,
) -> Result<CondensedSystem> {
    let (nc, nf) = (blocks.n_c(), blocks.n_f());
    if b_r.len() != nc || b_f.len() != nf || blocks.krf.shape() != (nc, nf) {
        return Err(Error::DimensionMismatch(format!(
            "blocks {nc}+{nf} against right-hand sides {}+{}",
            b_r.len(),
            b_f.len()
        )));
    }
    let krr = DenseFactor::new(&blocks.krr)?;
    let krr_inv_krf = krr.solve(&blocks.krf);
    let rc = b_f - blocks.krf.tr_mul(&krr.solve_vec(b_r));
    let schur = if nf <= explicit_limit {
        let mut s = blocks.kff.to_dense();
        if nc > 0 {
            s -= blocks.krf.tr_mul(&krr_inv_krf);
        }
        // keep exact symmetry for the CG recurrences
        Schur::Explicit(0.5 * (&s + s.transpose()))
    } else {
        Schur::Implicit {
            kff: blocks.kff.clone(),
            krf: blocks.krf.clone(),
        }
    };
    Ok(CondensedSystem {
        schur,
        krr,
        krf: blocks.krf.clone(),
        krr_inv_krf,
        rc,
    })
}

impl CondensedSystem {
    pub fn n_f(&self) -> usize {
        self.rc.len()
    }

    /// Replaces `R_C` for a new right-hand side on the same operator.
    pub fn set_rhs(&mut self, b_r: &DVector<f64>, b_f: &DVector<f64>) -> Result<()> {
        if b_r.len() != self.krf.nrows() || b_f.len() != self.rc.len() {
            return Err(Error::DimensionMismatch(format!(
                "right-hand sides {}+{} for a {}+{} system",
                b_r.len(),
                b_f.len(),
                self.krf.nrows(),
                self.rc.len()
            )));
        }
        self.rc = b_f - self.krf.tr_mul(&self.krr.solve_vec(b_r));
        Ok(())
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.schur {
            Schur::Explicit(s) => s * x,
            Schur::Implicit { kff, krf } => {
                let mut y = kff.mul_vec(x);
                if krf.nrows() > 0 {
                    y -= krf.tr_mul(&self.krr.solve_vec(&(krf * x)));
                }
                y
            }
        }
    }

    pub fn apply_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.schur {
            Schur::Explicit(s) => s * x,
            Schur::Implicit { kff, krf } => {
                let mut y = kff.mul_dense(x);
                if krf.nrows() > 0 {
                    y -= krf.tr_mul(&self.krr.solve(&(krf * x)));
                }
                y
            }
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match &self.schur {
            Schur::Explicit(s) => s.diagonal(),
            Schur::Implicit { kff, .. } => {
                let mut d = kff.diagonal();
                for i in 0..d.len() {
                    d[i] -= self.krf.column(i).dot(&self.krr_inv_krf.column(i));
                }
                d
            }
        }
    }

    /// Dense `S_P` (formed on demand for the implicit variant).
    pub fn to_dense(&self) -> DMatrix<f64> {
        match &self.schur {
            Schur::Explicit(s) => s.clone(),
            Schur::Implicit { .. } => self.apply_dense(&DMatrix::identity(self.n_f(), self.n_f())),
        }
    }

    pub fn is_explicit(&self) -> bool {
        matches!(self.schur, Schur::Explicit(_))
    }

    /// Dense LU of `S_P`, for operators the conjugate gradient cannot
    /// handle (indefinite past the limit point).
    pub fn factor_schur(&self) -> Result<SchurLu> {
        let s = self.to_dense();
        let scale = s.amax();
        let lu = LU::new(s);
        let u = lu.u();
        if let Some(row) = (0..u.nrows()).find(|&i| !(u[(i, i)].abs() > 1e-13 * scale)) {
            return Err(Error::SingularTangent {
                row,
                pivot: u[(row, row)],
            });
        }
        Ok(SchurLu(lu))
    }
}

/// Direct factorization of a condensed operator.
#[derive(Debug, Clone)]
pub struct SchurLu(LU<f64, Dyn, Dyn>);

impl SchurLu {
    pub fn solve(&self, rc: &DVector<f64>) -> DVector<f64> {
        if rc.is_empty() {
            return rc.clone();
        }
        self.0.solve(rc).expect("checked non-singular")
    }
}

/// Coarse space `span(C_f)`, filtered for rank and stored in an
/// `S_P`-orthogonal form so that `C_f^T S_P C_f` is diagonal.
#[derive(Debug, Clone)]
pub struct Augmentation {
    cf: DMatrix<f64>,
    /// `S_P C_f`
    w: DMatrix<f64>,
    /// diagonal of `C_f^T S_P C_f`
    g: DVector<f64>,
    dropped: usize,
}

impl Augmentation {
    pub fn none(n_f: usize) -> Self {
        Self {
            cf: DMatrix::zeros(n_f, 0),
            w: DMatrix::zeros(n_f, 0),
            g: DVector::zeros(0),
            dropped: 0,
        }
    }

    /// Builds the coarse space from the basis restricted to master DOFs.
    /// Directions whose normalized Gram eigenvalue falls below
    /// [`COARSE_RANK_TOL`] are dropped.
    pub fn new(sys: &CondensedSystem, cf: &DMatrix<f64>) -> Result<Self> {
        let nf = sys.n_f();
        if cf.nrows() != nf {
            return Err(Error::DimensionMismatch(format!(
                "C_f has {} rows for {nf} master DOFs",
                cf.nrows()
            )));
        }
        let w = sys.apply_dense(cf);
        let gram = cf.tr_mul(&w);
        let gram = 0.5 * (&gram + gram.transpose());
        let keep: Vec<usize> = (0..cf.ncols())
            .filter(|&j| gram[(j, j)] > 0.0 && cf.column(j).norm() > 0.0)
            .collect();
        if keep.is_empty() {
            return Ok(Self {
                dropped: cf.ncols(),
                ..Self::none(nf)
            });
        }
        let scale = DVector::from_iterator(
            keep.len(),
            keep.iter().map(|&j| gram[(j, j)].sqrt().recip()),
        );
        let normalized = DMatrix::from_fn(keep.len(), keep.len(), |a, b| {
            gram[(keep[a], keep[b])] * scale[a] * scale[b]
        });
        let eig = SymmetricEigen::new(normalized);
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let selected: Vec<usize> = (0..keep.len())
            .filter(|&i| eig.eigenvalues[i] > COARSE_RANK_TOL * top)
            .collect();
        if selected.is_empty() {
            return Err(Error::SingularCoarse);
        }
        // T = D V_k maps the kept columns onto S_P-orthogonal directions
        let t = DMatrix::from_fn(keep.len(), selected.len(), |a, k| {
            scale[a] * eig.eigenvectors[(a, selected[k])]
        });
        let cf_kept = DMatrix::from_fn(nf, keep.len(), |i, a| cf[(i, keep[a])]);
        let w_kept = DMatrix::from_fn(nf, keep.len(), |i, a| w[(i, keep[a])]);
        let g =
            DVector::from_iterator(selected.len(), selected.iter().map(|&i| eig.eigenvalues[i]));
        Ok(Self {
            cf: cf_kept * &t,
            w: w_kept * &t,
            g,
            dropped: cf.ncols() - selected.len(),
        })
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    /// Number of input directions removed by the rank filter.
    pub fn dropped(&self) -> usize {
        self.dropped
    }

    pub fn coarse_basis(&self) -> &DMatrix<f64> {
        &self.cf
    }

    /// `P x = x - C_f (C_f^T S_P C_f)^-1 C_f^T S_P x`
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return x.clone();
        }
        let coeff = self.w.tr_mul(x).component_div(&self.g);
        x - &self.cf * coeff
    }

    /// `C_f (C_f^T S_P C_f)^-1 C_f^T r`
    fn coarse_solve(&self, r: &DVector<f64>) -> DVector<f64> {
        if self.dim() == 0 {
            return DVector::zeros(r.len());
        }
        &self.cf * self.cf.tr_mul(r).component_div(&self.g)
    }
}

/// Coarse initialization `dU_C = C_f (C_f^T S_P C_f)^-1 C_f^T R_C`.
pub fn coarse_init(sys: &CondensedSystem, aug: &Augmentation) -> DVector<f64> {
    aug.coarse_solve(&sys.rc)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Preconditioner {
    Identity,
    Diagonal(DVector<f64>),
}

impl Preconditioner {
    fn apply(&self, r: &DVector<f64>) -> DVector<f64> {
        match self {
            Preconditioner::Identity => r.clone(),
            Preconditioner::Diagonal(inv) => r.component_mul(inv),
        }
    }
}

/// `M^-1 = diag(S_P)^-1`.
pub fn diagonal_preconditioner(sys: &CondensedSystem) -> Result<Preconditioner> {
    let d = sys.diagonal();
    if let Some((row, &value)) = d.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::NonPositiveDiagonal { row, value });
    }
    Ok(Preconditioner::Diagonal(d.map(f64::recip)))
}

/// Diagonal preconditioner, or the identity (with a warning) when the
/// diagonal of `S_P` has a non-positive entry.
pub fn default_preconditioner(sys: &CondensedSystem) -> Preconditioner {
    match diagonal_preconditioner(sys) {
        Ok(p) => p,
        Err(e) => {
            warn!("{e}; using the identity preconditioner");
            Preconditioner::Identity
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgOptions {
    /// Stop when the preconditioned residual norm, relative to that of
    /// `R_C`, falls below this.
    pub tol: f64,
    pub max_iters: usize,
    /// `S_P`-orthogonalize each new direction against all previous ones.
    #[serde(default)]
    pub reorthogonalize: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 1000,
            reorthogonalize: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CgReport {
    pub iterations: usize,
    /// `|R_C - S_P x_j| / |R_C|`, starting with the coarse initialization.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// Augmented preconditioned conjugate gradient on `S_P dU_f = R_C`.
///
/// Returns `dU_f = dU_C + dU_K` with `dU_K` in `Ker(C_f^T S_P)`. Hitting
/// `max_iters` is not an error: the report says `converged: false`.
pub fn augmented_pcg(
    sys: &CondensedSystem,
    aug: &Augmentation,
    precond: &Preconditioner,
    opts: &CgOptions,
) -> Result<(DVector<f64>, CgReport)> {
    let rc = &sys.rc;
    let rc_norm = rc.norm();
    let mut report = CgReport::default();
    if rc_norm == 0.0 {
        report.residual_history.push(0.0);
        report.converged = true;
        return Ok((DVector::zeros(rc.len()), report));
    }
    let mut x = coarse_init(sys, aug);
    let mut r = rc - sys.apply(&x);
    report.residual_history.push(r.norm() / rc_norm);

    let z_rc = precond.apply(rc);
    let ref_norm = rc.dot(&z_rc).abs().sqrt();
    let mut z = aug.project(&precond.apply(&r));
    let mut rz = r.dot(&z);
    let mut w = z.clone();
    let mut directions: Vec<(DVector<f64>, DVector<f64>, f64)> = Vec::new();

    loop {
        if rz.abs().sqrt() <= opts.tol * ref_norm || r.norm() == 0.0 {
            report.converged = true;
            break;
        }
        if report.iterations >= opts.max_iters {
            break;
        }
        let q = sys.apply(&w);
        let curvature = w.dot(&q);
        if !(curvature > 0.0) {
            return Err(Error::BreakdownNonSpd {
                iteration: report.iterations,
                curvature,
            });
        }
        let alpha = rz / curvature;
        x.axpy(alpha, &w, 1.0);
        r.axpy(-alpha, &q, 1.0);
        report.iterations += 1;
        report.residual_history.push(r.norm() / rc_norm);
        if opts.reorthogonalize {
            directions.push((w.clone(), q, curvature));
        }

        z = aug.project(&precond.apply(&r));
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        w = &z + &w * beta;
        if opts.reorthogonalize {
            for (wi, qi, ci) in &directions {
                let c = qi.dot(&w) / ci;
                w.axpy(-c, wi, 1.0);
            }
        }
    }
    Ok((x, report))
}

/// `d_alpha = K_rr^-1 (b_r - K_rf dU_f)`.
pub fn back_substitute(
    sys: &CondensedSystem,
    b_r: &DVector<f64>,
    du_f: &DVector<f64>,
) -> DVector<f64> {
    if b_r.is_empty() {
        return b_r.clone();
    }
    sys.krr.solve_vec(&(b_r - &sys.krf * du_f))
}

/// Full pipeline: condense, coarse initialization, augmented PCG with the
/// diagonal preconditioner, back-substitution. `cf` is the basis restricted
/// to the master DOFs (`n_f x n_c`).
pub fn solve_two_level(
    blocks: &ReducedBlocks,
    cf: &DMatrix<f64>,
    b_r: &DVector<f64>,
    b_f: &DVector<f64>,
    opts: &CgOptions,
) -> Result<(DVector<f64>, DVector<f64>, CgReport)> {
    let sys = condense(blocks, b_r, b_f)?;
    let aug = Augmentation::new(&sys, cf)?;
    let precond = default_preconditioner(&sys);
    let (du_f, report) = augmented_pcg(&sys, &aug, &precond, opts)?;
    let d_alpha = back_substitute(&sys, b_r, &du_f);
    Ok((d_alpha, du_f, report))
}
