//! On-the-fly global corrections of the reduced basis.
//!
//! When the locally reduced problem is nearly converged but the full
//! residual is still large, a coarse projected CG on the full-order secant
//! system yields a direction that is `K`-orthogonal to the basis; it is
//! normalized and appended to the basis (and later to the snapshots).

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{
    augmented_pcg, coarse_init, condense_with_limit, default_preconditioner, Augmentation,
    CgOptions, ReducedBlocks,
};
use crate::lattice::{tangent_stiffness, LatticeModel, TangentMode};
use crate::localglobal::{run_reduced, ReducedConfig, ReducedRun};
use crate::nonlinear::{GateContext, IncrementControl};
use crate::pod::ReducedBasis;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionPolicy {
    /// Relative full residual above which a correction is wanted.
    #[serde(default = "default_eta_global")]
    pub eta_global: f64,
    /// Relative reduced residual below which a correction is allowed.
    #[serde(default = "default_eta_reduced")]
    pub eta_reduced: f64,
    /// Stopping tolerance of the correction CG.
    #[serde(default = "default_coarse_tol")]
    pub krylov_tol_correction: f64,
    #[serde(default = "default_max_corrections")]
    pub max_corrections_per_increment: usize,
    #[serde(default = "default_krylov_iters")]
    pub max_krylov_iters: usize,
}

fn default_eta_global() -> f64 {
    1e-1
}

fn default_eta_reduced() -> f64 {
    1e-3
}

fn default_coarse_tol() -> f64 {
    1e-1
}

fn default_max_corrections() -> usize {
    5
}

fn default_krylov_iters() -> usize {
    2000
}

impl Default for CorrectionPolicy {
    fn default() -> Self {
        Self {
            eta_global: default_eta_global(),
            eta_reduced: default_eta_reduced(),
            krylov_tol_correction: default_coarse_tol(),
            max_corrections_per_increment: default_max_corrections(),
            max_krylov_iters: default_krylov_iters(),
        }
    }
}

impl CorrectionPolicy {
    /// A policy whose gate never opens.
    pub fn disabled() -> Self {
        Self {
            eta_global: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tol = self.krylov_tol_correction;
        if !(tol > 0.0 && tol < 1.0)
            || !(self.eta_reduced > 0.0)
            || self.eta_global.is_nan()
            || self.eta_global <= 0.0
        {
            return Err(Error::Scenario(format!(
                "invalid correction policy {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub increment: usize,
    pub newton_iter: usize,
    pub reduced_residual: f64,
    pub full_residual_before: f64,
    /// Full residual after the next Newton step, when there was one.
    pub full_residual_after: Option<f64>,
    pub krylov_iterations: usize,
    /// `|C^T K v| / (|K| |v|)` at injection.
    pub coupling: f64,
    pub n_c_after: usize,
}

/// Output of [`global_correction`].
#[derive(Debug, Clone)]
pub struct Correction {
    /// `dU_K / |dU_K|`
    pub direction: DVector<f64>,
    /// `dU_K` before normalization.
    pub raw: DVector<f64>,
    pub krylov_iterations: usize,
    pub coupling: f64,
}

/// Coarse solution of `K_bar dU = r` split as `dU_C + dU_K`, `dU_C` in
/// `span(C)` and `dU_K` in `Ker(C^T K_bar)`; returns the normalized `dU_K`.
/// `r` is the out-of-balance force (the Newton right-hand side).
pub fn global_correction(
    k_bar: &CsrMatrix,
    r: &DVector<f64>,
    c: &DMatrix<f64>,
    policy: &CorrectionPolicy,
) -> Result<Correction> {
    let n = k_bar.nrows();
    if r.len() != n || c.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "correction system of order {n} with residual {} and basis {}",
            r.len(),
            c.nrows()
        )));
    }
    let blocks = ReducedBlocks {
        krr: DMatrix::zeros(0, 0),
        krf: DMatrix::zeros(0, n),
        kff: k_bar.clone(),
    };
    let sys = condense_with_limit(&blocks, &DVector::zeros(0), r, 0)?;
    let aug = if c.ncols() == 0 {
        Augmentation::none(n)
    } else {
        Augmentation::new(&sys, c)?
    };
    let precond = default_preconditioner(&sys);
    let opts = CgOptions {
        tol: policy.krylov_tol_correction,
        max_iters: policy.max_krylov_iters,
        reorthogonalize: false,
    };
    let (x, report) = augmented_pcg(&sys, &aug, &precond, &opts)?;
    let raw = &x - coarse_init(&sys, &aug);
    let norm = raw.norm();
    if norm == 0.0 || norm < 1e-12 * x.norm() {
        return Err(Error::NegligibleCorrection);
    }
    let direction = &raw / norm;
    let kv = k_bar.mul_vec(&direction);
    let coupling = if c.ncols() == 0 {
        0.0
    } else {
        c.tr_mul(&kv).norm() / k_bar.frobenius_norm()
    };
    Ok(Correction {
        direction,
        raw,
        krylov_iterations: report.iterations,
        coupling,
    })
}

/// Gate and bookkeeping of the corrections during a run.
#[derive(Debug, Clone)]
pub struct Corrector {
    policy: CorrectionPolicy,
    increment: usize,
    in_increment: usize,
    exhausted: bool,
    records: Vec<CorrectionRecord>,
    /// (record index, gate calls seen since the injection)
    pending: Option<(usize, usize)>,
    vectors: Vec<DVector<f64>>,
}

impl Corrector {
    pub fn new(policy: CorrectionPolicy) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            increment: 0,
            in_increment: 0,
            exhausted: false,
            records: Vec::new(),
            pending: None,
            vectors: Vec::new(),
        })
    }

    pub fn policy(&self) -> &CorrectionPolicy {
        &self.policy
    }

    pub fn begin_increment(&mut self, index: usize) {
        self.increment = index;
        self.in_increment = 0;
        self.exhausted = false;
        self.pending = None;
    }

    pub fn records(&self) -> &[CorrectionRecord] {
        &self.records
    }

    /// Unnormalized corrections injected since the last call.
    pub fn take_vectors(&mut self) -> Vec<DVector<f64>> {
        std::mem::take(&mut self.vectors)
    }

    /// Returns a correction direction when both gates are open.
    pub fn consider(
        &mut self,
        ctx: &GateContext,
        basis: &ReducedBasis,
    ) -> Result<Option<DVector<f64>>> {
        if let Some((idx, seen)) = self.pending {
            // the first call after an injection re-evaluates the same iterate
            if seen >= 1 {
                self.records[idx].full_residual_after = Some(ctx.full_rel);
                self.pending = None;
            } else {
                self.pending = Some((idx, seen + 1));
            }
        }
        if self.exhausted
            || self.in_increment >= self.policy.max_corrections_per_increment
            || !(ctx.reduced_rel < self.policy.eta_reduced && ctx.full_rel > self.policy.eta_global)
        {
            return Ok(None);
        }
        let k_bar = tangent_stiffness(ctx.model, ctx.u, ctx.trial, TangentMode::Secant);
        let rhs = -ctx.residual;
        let correction = match global_correction(&k_bar, &rhs, basis.matrix(), &self.policy) {
            Ok(c) => c,
            Err(Error::NegligibleCorrection) => {
                debug!("increment {}: correction negligible", self.increment);
                self.exhausted = true;
                return Ok(None);
            }
            Err(e @ (Error::BreakdownNonSpd { .. } | Error::SingularCoarse)) => {
                warn!("increment {}: correction skipped ({e})", self.increment);
                self.exhausted = true;
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        debug!(
            "increment {} newton {}: correction after {} CG iterations (full residual {:.3e})",
            self.increment, ctx.newton_iter, correction.krylov_iterations, ctx.full_rel
        );
        self.in_increment += 1;
        self.records.push(CorrectionRecord {
            increment: self.increment,
            newton_iter: ctx.newton_iter,
            reduced_residual: ctx.reduced_rel,
            full_residual_before: ctx.full_rel,
            full_residual_after: None,
            krylov_iterations: correction.krylov_iterations,
            coupling: correction.coupling,
            n_c_after: basis.n_c() + 1,
        });
        self.pending = Some((self.records.len() - 1, 0));
        self.vectors.push(correction.raw);
        Ok(Some(correction.direction))
    }
}

/// Reduced run with corrections injected whenever the gates open.
pub fn adaptive_solve(
    model: &LatticeModel,
    control: &IncrementControl,
    basis: ReducedBasis,
    config: &ReducedConfig,
    policy: &CorrectionPolicy,
    n_increments: usize,
) -> Result<ReducedRun> {
    run_reduced(model, control, basis, config, Some(policy), n_increments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{build_frame_lattice, BoxRegion, FrameSpec, Layout};
    use crate::lattice::DamageState;
    use crate::localglobal::{newton_solve_localglobal, Splitting};
    use crate::nonlinear::newton_solve_full;
    use crate::pod::orthonormalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_cube() -> LatticeModel {
        let mut spec = FrameSpec::tower();
        spec.nx = 3;
        spec.ny = 3;
        spec.nz = 3;
        spec.layout = Layout::Solid;
        spec.loaded_box = Some(BoxRegion {
            min: [0.0, 0.0, 3.0],
            max: [1.0, 1.0, 3.0],
        });
        spec.material.damage = false;
        build_frame_lattice(&spec).unwrap()
    }

    #[test]
    fn exact_basis_gives_negligible_correction() {
        let m = linear_cube();
        let n = m.n_free();
        let k = tangent_stiffness(
            &m,
            &DVector::zeros(n),
            &DamageState::undamaged(m.n_bars()),
            TangentMode::Secant,
        );
        let (exact, _) = newton_solve_full(
            &m,
            &DamageState::undamaged(m.n_bars()),
            &DVector::zeros(n),
            1.0,
            1e-13,
            3,
        )
        .unwrap();
        let c = DMatrix::from_columns(&[exact.normalize()]);
        let r = m.unit_load().clone();
        assert!(matches!(
            global_correction(&k, &r, &c, &CorrectionPolicy::default()),
            Err(Error::NegligibleCorrection)
        ));
    }

    #[test]
    fn one_correction_recovers_the_linear_solution() {
        let m = linear_cube();
        let n = m.n_free();
        let undamaged = DamageState::undamaged(m.n_bars());
        let k = tangent_stiffness(&m, &DVector::zeros(n), &undamaged, TangentMode::Secant);
        let (exact, _) =
            newton_solve_full(&m, &undamaged, &DVector::zeros(n), 1.0, 1e-13, 3).unwrap();
        // a basis direction orthogonal to the solution
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut c0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        c0 -= &exact * (exact.dot(&c0) / exact.norm_squared());
        let c = DMatrix::from_columns(&[c0.normalize()]);
        let policy = CorrectionPolicy {
            krylov_tol_correction: 1e-10,
            ..CorrectionPolicy::default()
        };
        let corr = global_correction(&k, m.unit_load(), &c, &policy).unwrap();
        assert!((corr.direction.norm() - 1.0).abs() < 1e-14);
        assert!((c.tr_mul(&k.mul_vec(&corr.direction))).amax() < 1e-8 * k.frobenius_norm());

        let mut basis = ReducedBasis::from_columns(&c);
        assert!(basis.append_orthogonal(&corr.direction, 1e-10));
        assert!(basis.orthonormality_error() < 1e-10);
        let (du, metrics) = newton_solve_localglobal(
            &m,
            &undamaged,
            &DVector::zeros(n),
            &basis,
            &Splitting::empty(n, 0),
            1.0,
            1e-10,
            3,
            &CgOptions::default(),
        )
        .unwrap();
        assert_eq!(metrics.newton_iters, 1);
        assert!((du - &exact).norm() < 1e-8 * exact.norm());
    }

    #[test]
    fn correction_is_k_orthogonal_at_coarse_tolerance() {
        let m = linear_cube();
        let n = m.n_free();
        let k = tangent_stiffness(
            &m,
            &DVector::zeros(n),
            &DamageState::undamaged(m.n_bars()),
            TangentMode::Secant,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = orthonormalize(&DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0)));
        let corr = global_correction(&k, m.unit_load(), &c, &CorrectionPolicy::default()).unwrap();
        assert!(corr.coupling < 1e-10);
        assert!(corr.krylov_iterations > 0);
    }

    #[test]
    fn policy_defaults_and_validation() {
        let p = CorrectionPolicy::default();
        assert_eq!(
            (p.eta_global, p.eta_reduced, p.krylov_tol_correction),
            (1e-1, 1e-3, 1e-1)
        );
        assert!(p.validate().is_ok());
        assert!(CorrectionPolicy::disabled().validate().is_ok());
        let bad = CorrectionPolicy {
            krylov_tol_correction: 1.0,
            ..p
        };
        assert!(bad.validate().is_err());
    }
}
