//! Splitting of the free DOFs into reduced and fully resolved sets, the
//! coupling operator `A = (P_r C | E_f^T)`, the locally reduced balance
//! equations and the incremental drivers built on them.

use log::{debug, trace};
use nalgebra::DMatrix;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::adaptivity::{CorrectionPolicy, CorrectionRecord, Corrector};
use crate::error::{Error, Result};
use crate::krylov::{
    augmented_pcg, back_substitute, condense, diagonal_preconditioner, Augmentation, CgOptions,
    CgReport, ReducedBlocks,
};
use crate::lattice::{internal_forces, DamageState, LatticeModel, TangentMode};
use crate::nonlinear::{
    controlled_step, newton_increment, Constraint, Driver, GateContext, IncrementControl,
    IncrementMetrics, LinearSolveRecord, LinearizedSpace, SolveHistory,
};
use crate::pod::{compute_pod_basis, orthonormalize, ReducedBasis, SnapshotMatrix, Truncation};
use crate::sparse::CsrMatrix;

/// Parameters of the greedy sphere selection of fully resolved DOFs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitParams {
    #[serde(default = "default_rho")]
    pub rho_s: f64,
    #[serde(default = "default_kdam")]
    pub k_dam: f64,
    #[serde(default = "default_klocglo")]
    pub k_locglo: f64,
}

fn default_rho() -> f64 {
    2.5
}

fn default_kdam() -> f64 {
    0.5
}

fn default_klocglo() -> f64 {
    0.1
}

impl Default for SplitParams {
    fn default() -> Self {
        Self {
            rho_s: default_rho(),
            k_dam: default_kdam(),
            k_locglo: default_klocglo(),
        }
    }
}

impl SplitParams {
    pub fn validate(&self) -> Result<()> {
        let ratio = |v: f64| v > 0.0 && v <= 1.0;
        if !(self.rho_s > 0.0 && self.rho_s.is_finite())
            || !ratio(self.k_dam)
            || !ratio(self.k_locglo)
        {
            return Err(Error::Scenario(format!(
                "invalid splitting parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Partition of the free DOFs; `fully_resolved` and `reduced` are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splitting {
    pub fully_resolved: Vec<usize>,
    pub reduced: Vec<usize>,
    pub epoch: usize,
}

impl Splitting {
    pub fn from_resolved(n_u: usize, mut resolved: Vec<usize>, epoch: usize) -> Result<Self> {
        resolved.sort_unstable();
        resolved.dedup();
        if resolved.last().is_some_and(|&i| i >= n_u) {
            return Err(Error::DimensionMismatch(format!(
                "resolved DOF beyond {n_u} unknowns"
            )));
        }
        let mut mask = vec![false; n_u];
        for &i in &resolved {
            mask[i] = true;
        }
        let reduced = (0..n_u).filter(|&i| !mask[i]).collect();
        Ok(Self {
            fully_resolved: resolved,
            reduced,
            epoch,
        })
    }

    /// Pure POD: nothing resolved.
    pub fn empty(n_u: usize, epoch: usize) -> Self {
        Self {
            fully_resolved: Vec::new(),
            reduced: (0..n_u).collect(),
            epoch,
        }
    }

    /// Full order: everything resolved.
    pub fn all(n_u: usize, epoch: usize) -> Self {
        Self {
            fully_resolved: (0..n_u).collect(),
            reduced: Vec::new(),
            epoch,
        }
    }

    pub fn n_u(&self) -> usize {
        self.fully_resolved.len() + self.reduced.len()
    }

    pub fn n_f(&self) -> usize {
        self.fully_resolved.len()
    }

    pub fn n_r(&self) -> usize {
        self.reduced.len()
    }

    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.n_u()];
        for &i in &self.fully_resolved {
            m[i] = true;
        }
        m
    }

    /// `E_f v`
    pub fn extract_f(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n_f(), self.fully_resolved.iter().map(|&i| v[i]))
    }

    /// `E_r v`
    pub fn extract_r(&self, v: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n_r(), self.reduced.iter().map(|&i| v[i]))
    }

    /// `E_f^T x`
    pub fn prolong_f(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_u());
        for (k, &i) in self.fully_resolved.iter().enumerate() {
            v[i] = x[k];
        }
        v
    }

    /// `E_r^T x`
    pub fn prolong_r(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_u());
        for (k, &i) in self.reduced.iter().enumerate() {
            v[i] = x[k];
        }
        v
    }

    /// `P_r v`: zeroes the fully resolved rows.
    pub fn project_r(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut w = v.clone();
        for &i in &self.fully_resolved {
            w[i] = 0.0;
        }
        w
    }

    /// `P_r C`
    pub fn project_r_columns(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        let mut w = c.clone();
        for &i in &self.fully_resolved {
            w.row_mut(i).fill(0.0);
        }
        w
    }

    /// `E_f C`
    pub fn rows_f(&self, c: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_f(), c.ncols(), |k, j| c[(self.fully_resolved[k], j)])
    }
}

/// Greedy selection around the bars with the largest damage increment
/// between `d_prev` and `d_curr`: a sphere of radius `rho_s` centred at the
/// bar midpoint marks every free DOF of the nodes it contains. Stops when
/// the largest increment among bars not yet fully covered drops below
/// `k_dam` times the global maximum, or when more than `k_locglo * n_u` DOFs
/// are resolved.
pub fn select_fully_resolved(
    model: &LatticeModel,
    d_prev: &[f64],
    d_curr: &[f64],
    params: &SplitParams,
    epoch: usize,
) -> Result<Splitting> {
    params.validate()?;
    if d_prev.len() != model.n_bars() || d_curr.len() != model.n_bars() {
        return Err(Error::DimensionMismatch(
            "damage fields do not match the bars".into(),
        ));
    }
    let n_u = model.n_free();
    let delta: Vec<f64> = d_curr.iter().zip(d_prev).map(|(c, p)| c - p).collect();
    let global = delta.iter().copied().fold(0.0, f64::max);
    let mut resolved = vec![false; n_u];
    let mut n_f = 0;
    if global > 0.0 {
        let cap = params.k_locglo * n_u as f64;
        let mut seeded = vec![false; model.n_bars()];
        loop {
            // remaining: not yet a seed and not fully covered
            let next = (0..model.n_bars())
                .filter(|&b| !seeded[b] && model.bar_free_dofs(b).any(|i| !resolved[i]))
                .fold(None, |best: Option<usize>, b| match best {
                    Some(a) if delta[a] >= delta[b] => Some(a),
                    _ => Some(b),
                });
            let Some(bar) = next else { break };
            if delta[bar] < params.k_dam * global || delta[bar] <= 0.0 {
                break;
            }
            seeded[bar] = true;
            let centre = model.bar_midpoint(bar);
            for node in model.nodes() {
                if (node.position - centre).norm() <= params.rho_s + 1e-9 {
                    for c in 0..3 {
                        if let Some(i) = model.free_index(3 * node.id + c) {
                            if !resolved[i] {
                                resolved[i] = true;
                                n_f += 1;
                            }
                        }
                    }
                }
            }
            if n_f as f64 > cap {
                break;
            }
        }
    }
    let list = (0..n_u).filter(|&i| resolved[i]).collect();
    Splitting::from_resolved(n_u, list, epoch)
}

/// `A = (P_r C | E_f^T)` applied through the index map of the splitting.
#[derive(Debug, Clone, Copy)]
pub struct CouplingOperator<'a> {
    c: &'a DMatrix<f64>,
    split: &'a Splitting,
}

pub fn build_coupling_operator<'a>(
    c: &'a DMatrix<f64>,
    split: &'a Splitting,
) -> Result<CouplingOperator<'a>> {
    if c.nrows() != split.n_u() {
        return Err(Error::DimensionMismatch(format!(
            "basis has {} rows for {} free DOFs",
            c.nrows(),
            split.n_u()
        )));
    }
    Ok(CouplingOperator { c, split })
}

impl CouplingOperator<'_> {
    pub fn n_c(&self) -> usize {
        self.c.ncols()
    }

    pub fn n_f(&self) -> usize {
        self.split.n_f()
    }

    /// `A X` with `X = (alpha, dU_f)`.
    pub fn apply(&self, alpha: &DVector<f64>, du_f: &DVector<f64>) -> Result<DVector<f64>> {
        if alpha.len() != self.n_c() || du_f.len() != self.n_f() {
            return Err(Error::DimensionMismatch(format!(
                "state ({}, {}) for coupling ({}, {})",
                alpha.len(),
                du_f.len(),
                self.n_c(),
                self.n_f()
            )));
        }
        let mut v = self.split.project_r(&(self.c * alpha));
        for (k, &i) in self.split.fully_resolved.iter().enumerate() {
            v[i] = du_f[k];
        }
        Ok(v)
    }

    /// `A^T v`, split as (`C^T P_r v`, `E_f v`).
    pub fn transpose_apply(&self, v: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (
            self.c.tr_mul(&self.split.project_r(v)),
            self.split.extract_f(v),
        )
    }

    /// Dense `A` (checks only).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let (n_u, n_c, n_f) = (self.split.n_u(), self.n_c(), self.n_f());
        let mut a = DMatrix::zeros(n_u, n_c + n_f);
        a.view_mut((0, 0), (n_u, n_c))
            .copy_from(&self.split.project_r_columns(self.c));
        for (k, &i) in self.split.fully_resolved.iter().enumerate() {
            a[(i, n_c + k)] = 1.0;
        }
        a
    }
}

/// `R_R(X) = A^T (F_int(U_n + A X) + lambda F_unit)` with the damage
/// following the iterate from the history of `state`.
pub fn reduced_residual(
    a: &CouplingOperator,
    model: &LatticeModel,
    state: &DamageState,
    u_n: &DVector<f64>,
    alpha: &DVector<f64>,
    du_f: &DVector<f64>,
    load_factor: f64,
) -> Result<DVector<f64>> {
    let u = u_n + a.apply(alpha, du_f)?;
    let trial = state.trial(model, &u);
    let r = internal_forces(model, &u, &trial) + model.unit_load() * load_factor;
    let (rr, rf) = a.transpose_apply(&r);
    Ok(concat(&rr, &rf))
}

fn concat(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

/// Blocks of `A^T K A`: `K_rr = C^T P_r K P_r C`, `K_rf = C^T P_r K E_f^T`,
/// `K_ff = E_f K E_f^T` (sparse).
pub fn reduced_tangent(a: &CouplingOperator, k: &CsrMatrix) -> Result<ReducedBlocks> {
    let pc = a.split.project_r_columns(a.c);
    reduced_blocks(&pc, &a.split.fully_resolved, k)
}

fn reduced_blocks(pc: &DMatrix<f64>, resolved: &[usize], k: &CsrMatrix) -> Result<ReducedBlocks> {
    if k.nrows() != pc.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "tangent of order {} for {} rows",
            k.nrows(),
            pc.nrows()
        )));
    }
    let kpc = k.mul_dense(pc);
    let krr = pc.tr_mul(&kpc);
    let krr = 0.5 * (&krr + krr.transpose());
    let krf = DMatrix::from_fn(pc.ncols(), resolved.len(), |a, j| kpc[(resolved[j], a)]);
    Ok(ReducedBlocks {
        krr,
        krf,
        kff: k.submatrix(resolved),
    })
}

/// Appends `local_solutions` to the snapshots and recomputes the POD basis.
pub fn enrich_basis(
    s: &SnapshotMatrix,
    local_solutions: &[DVector<f64>],
    truncation: Truncation,
) -> Result<(SnapshotMatrix, ReducedBasis)> {
    let mut s = s.clone();
    for (k, v) in local_solutions.iter().enumerate() {
        s.push(v, format!("local{k}"))?;
    }
    let basis = compute_pod_basis(&s, truncation)?;
    Ok((s, basis))
}

/// Basis together with the weights (square roots of the retained
/// correlation eigenvalues) used to re-sort it when new vectors arrive.
#[derive(Debug, Clone)]
pub struct WeightedBasis {
    basis: ReducedBasis,
    weights: Vec<f64>,
}

impl WeightedBasis {
    pub fn new(basis: ReducedBasis) -> Self {
        let lambdas = basis.lambdas();
        let weights = (0..basis.n_c())
            .map(|i| lambdas.get(i).map_or(1.0, |l| l.sqrt()))
            .collect();
        Self { basis, weights }
    }

    pub fn basis(&self) -> &ReducedBasis {
        &self.basis
    }

    /// Spectral re-sort of the weighted basis columns together with `extra`:
    /// every direction above the rank cutoff is kept, so the span only grows.
    pub fn enrich(&mut self, extra: &[DVector<f64>]) -> Result<()> {
        let extra: Vec<&DVector<f64>> = extra.iter().filter(|v| v.norm() > 0.0).collect();
        if extra.is_empty() {
            return Ok(());
        }
        let c = self.basis.matrix();
        let kept = self.weights.len().min(c.ncols());
        let mut s = SnapshotMatrix::new(c.nrows());
        for j in 0..kept {
            s.push(&(c.column(j) * self.weights[j]), format!("mode{j}"))?;
        }
        for (k, v) in extra.iter().enumerate() {
            s.push(v, format!("new{k}"))?;
        }
        let basis = compute_pod_basis(&s, Truncation::Full)?;
        self.weights = basis
            .lambdas()
            .iter()
            .take(basis.n_c())
            .map(|l| l.sqrt())
            .collect();
        self.basis = basis;
        Ok(())
    }
}

/// What to do with a condensed operator that is not positive definite, which
/// happens with the consistent tangent once bars soften.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indefinite {
    /// Reject a consistent tangent so that Newton retries with the secant
    /// one; a secant system that still defeats CG is solved directly.
    #[default]
    Secant,
    /// Keep the consistent tangent and solve its Schur complement directly.
    Direct,
}

/// Linearized solves in `span(A)` through condensation and augmented CG.
#[derive(Debug)]
pub struct LocalGlobalSpace {
    basis: ReducedBasis,
    split: Splitting,
    /// `P_r C`
    pc: DMatrix<f64>,
    cg: CgOptions,
    indefinite: Indefinite,
    measure_unaugmented: bool,
    corrector: Option<Corrector>,
    records: Vec<LinearSolveRecord>,
}

impl LocalGlobalSpace {
    pub fn new(basis: ReducedBasis, split: Splitting, cg: CgOptions) -> Result<Self> {
        build_coupling_operator(basis.matrix(), &split)?;
        let pc = split.project_r_columns(basis.matrix());
        Ok(Self {
            basis,
            split,
            pc,
            cg,
            indefinite: Indefinite::default(),
            measure_unaugmented: false,
            corrector: None,
            records: Vec::new(),
        })
    }

    /// Also run every condensed system without augmentation and record the
    /// iteration count (for comparisons only, the result is discarded).
    pub fn measure_unaugmented(mut self, on: bool) -> Self {
        self.measure_unaugmented = on;
        self
    }

    pub fn indefinite(mut self, strategy: Indefinite) -> Self {
        self.indefinite = strategy;
        self
    }

    pub fn with_corrector(mut self, corrector: Corrector) -> Self {
        self.corrector = Some(corrector);
        self
    }

    pub fn corrector(&self) -> Option<&Corrector> {
        self.corrector.as_ref()
    }

    pub fn corrector_mut(&mut self) -> Option<&mut Corrector> {
        self.corrector.as_mut()
    }

    pub fn basis(&self) -> &ReducedBasis {
        &self.basis
    }

    pub fn splitting(&self) -> &Splitting {
        &self.split
    }

    pub fn set_splitting(&mut self, split: Splitting) -> Result<()> {
        build_coupling_operator(self.basis.matrix(), &split)?;
        self.split = split;
        self.refresh();
        Ok(())
    }

    pub fn set_basis(&mut self, basis: ReducedBasis) -> Result<()> {
        build_coupling_operator(basis.matrix(), &self.split)?;
        self.basis = basis;
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        self.pc = self.split.project_r_columns(self.basis.matrix());
    }
}

impl LinearizedSpace for LocalGlobalSpace {
    fn restrict_norm(&self, v: &DVector<f64>) -> f64 {
        let r = self.pc.tr_mul(v).norm_squared();
        let f: f64 = self.split.fully_resolved.iter().map(|&i| v[i] * v[i]).sum();
        (r + f).sqrt()
    }

    fn solve(
        &mut self,
        k: &CsrMatrix,
        mode: TangentMode,
        rhs: &[DVector<f64>],
        newton_iter: usize,
    ) -> Result<Vec<DVector<f64>>> {
        // an orthonormal basis of span(P_r C) keeps K_rr well conditioned when
        // the restriction collapses some basis vectors; span(A) is unchanged
        let b = orthonormalize(&self.pc);
        let blocks = reduced_blocks(&b, &self.split.fully_resolved, k)?;
        let (nb, nf) = (b.ncols(), self.split.n_f());
        let mut sys = condense(&blocks, &DVector::zeros(nb), &DVector::zeros(nf))?;
        let aug = Augmentation::new(&sys, &self.split.rows_f(self.basis.matrix()))?;
        let reject = mode == TangentMode::Consistent && self.indefinite == Indefinite::Secant;
        // a non-positive diagonal means S_P is indefinite (softening bars in
        // the resolved zone)
        let precond = match diagonal_preconditioner(&sys) {
            Ok(p) => Some(p),
            Err(e) if reject => return Err(e),
            Err(_) => None,
        };
        let mut lu = None;
        let mut out = Vec::with_capacity(rhs.len());
        let mut records = Vec::with_capacity(rhs.len());
        for r in rhs {
            let b_r = b.tr_mul(r);
            let b_f = self.split.extract_f(r);
            sys.set_rhs(&b_r, &b_f)?;
            let attempt = precond
                .as_ref()
                .map(|p| augmented_pcg(&sys, &aug, p, &self.cg));
            let (du_f, report, direct) = match attempt {
                Some(Ok((x, report))) if report.converged => (x, report, false),
                Some(Err(e)) if reject => return Err(e),
                other => {
                    let report = match other {
                        Some(Ok((_, report))) => report,
                        Some(Err(e)) => {
                            trace!("condensed CG rejected: {e}");
                            CgReport::default()
                        }
                        _ => CgReport::default(),
                    };
                    if lu.is_none() {
                        lu = Some(sys.factor_schur()?);
                    }
                    let x = lu.as_ref().expect("factorized").solve(&sys.rc);
                    (x, report, true)
                }
            };
            trace!(
                "condensed solve n_c {nb} n_f {nf}: {} CG iterations{}",
                report.iterations,
                if direct { ", direct" } else { "" }
            );
            let unaugmented_iterations = match (&precond, direct) {
                (Some(p), false) if self.measure_unaugmented && nf > 0 => {
                    augmented_pcg(&sys, &Augmentation::none(nf), p, &self.cg)
                        .ok()
                        .filter(|(_, rep)| rep.converged)
                        .map(|(_, rep)| rep.iterations)
                }
                _ => None,
            };
            let d_alpha = back_substitute(&sys, &b_r, &du_f);
            let mut v = &b * d_alpha;
            for (k, &i) in self.split.fully_resolved.iter().enumerate() {
                v[i] = du_f[k];
            }
            records.push(LinearSolveRecord {
                newton_iter,
                iterations: report.iterations,
                unaugmented_iterations,
                residual_history: report.residual_history,
                n_c: self.basis.n_c(),
                n_f: nf,
                direct,
            });
            out.push(v);
        }
        self.records.extend(records);
        Ok(out)
    }

    fn gate(&mut self, ctx: &GateContext) -> Result<bool> {
        let Some(corrector) = self.corrector.as_mut() else {
            return Ok(false);
        };
        match corrector.consider(ctx, &self.basis)? {
            Some(v) => {
                if !self.basis.append_orthogonal(&v, 1e-10) {
                    return Ok(false);
                }
                self.refresh();
                Ok(true)
            }
            None => Ok(false),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.basis.n_c(), self.split.n_f())
    }

    fn take_records(&mut self) -> Vec<LinearSolveRecord> {
        std::mem::take(&mut self.records)
    }
}

/// Equilibrium at a prescribed load factor with the increment sought in
/// `span(A)`. Returns the full displacement increment `A X` and the metrics.
#[allow(clippy::too_many_arguments)]
pub fn newton_solve_localglobal(
    model: &LatticeModel,
    state: &DamageState,
    u_n: &DVector<f64>,
    basis: &ReducedBasis,
    split: &Splitting,
    load_factor: f64,
    tol: f64,
    max_iters: usize,
    cg: &CgOptions,
) -> Result<(DVector<f64>, IncrementMetrics)> {
    let mut space = LocalGlobalSpace::new(basis.clone(), split.clone(), *cg)?;
    let out = newton_increment(
        model,
        &mut space,
        state,
        u_n,
        DVector::zeros(model.n_free()),
        load_factor,
        Constraint::Load(load_factor),
        tol,
        max_iters,
        0.0,
    )?;
    let metrics = IncrementMetrics {
        newton_iters: out.iterations,
        secant_fallbacks: out.secant_fallbacks,
        reduced_residual: out.reduced_rel,
        full_residual: out.full_rel,
        n_c: basis.n_c(),
        n_f: split.n_f(),
        linear_solves: space.take_records(),
        ..Default::default()
    };
    Ok((out.du, metrics))
}

/// How the fully resolved set is chosen at each increment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplittingPolicy {
    /// Nothing resolved: classic POD.
    None,
    /// Greedy spheres around the last damage increment.
    Greedy(SplitParams),
    /// Everything resolved: full order through the condensed solver.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReducedConfig {
    pub splitting: SplittingPolicy,
    pub cg: CgOptions,
    pub indefinite: Indefinite,
    /// Re-sort converged increments (and corrections) into the basis.
    pub enrich: bool,
    pub measure_unaugmented: bool,
}

impl ReducedConfig {
    pub fn pod() -> Self {
        Self {
            splitting: SplittingPolicy::None,
            // the load-direction solve must be accurate well below the Newton
            // tolerance or the bordered update stalls at the CG accuracy
            cg: CgOptions {
                tol: 1e-10,
                max_iters: 1000,
                reorthogonalize: true,
            },
            indefinite: Indefinite::default(),
            enrich: false,
            measure_unaugmented: false,
        }
    }

    pub fn localglobal(params: SplitParams) -> Self {
        Self {
            splitting: SplittingPolicy::Greedy(params),
            enrich: true,
            ..Self::pod()
        }
    }
}

/// Output of a reduced incremental run.
#[derive(Debug, Clone)]
pub struct ReducedRun {
    pub history: SolveHistory,
    /// Splitting used by each increment.
    pub splittings: Vec<Splitting>,
    pub corrections: Vec<CorrectionRecord>,
    pub basis: ReducedBasis,
}

/// Damage-controlled increments with the displacement sought in `span(A)`.
pub fn run_reduced(
    model: &LatticeModel,
    control: &IncrementControl,
    basis: ReducedBasis,
    config: &ReducedConfig,
    policy: Option<&CorrectionPolicy>,
    n_increments: usize,
) -> Result<ReducedRun> {
    match run_reduced_partial(model, control, basis, config, policy, n_increments)? {
        (run, None) => Ok(run),
        (_, Some(e)) => Err(e),
    }
}

/// Like [`run_reduced`], but keeps the increments converged before a solver
/// failure. Invalid inputs are still reported as errors.
pub fn run_reduced_partial(
    model: &LatticeModel,
    control: &IncrementControl,
    basis: ReducedBasis,
    config: &ReducedConfig,
    policy: Option<&CorrectionPolicy>,
    n_increments: usize,
) -> Result<(ReducedRun, Option<Error>)> {
    control.validate()?;
    let n_u = model.n_free();
    if basis.n_rows() != n_u {
        return Err(Error::DimensionMismatch(format!(
            "basis has {} rows for {n_u} free DOFs",
            basis.n_rows()
        )));
    }
    if let SplittingPolicy::Greedy(p) = &config.splitting {
        p.validate()?;
    }
    let mut weighted = WeightedBasis::new(basis.clone());
    let mut space = LocalGlobalSpace::new(basis, Splitting::empty(n_u, 0), config.cg)?
        .indefinite(config.indefinite)
        .measure_unaugmented(config.measure_unaugmented);
    if let Some(p) = policy {
        space = space.with_corrector(Corrector::new(*p)?);
    }
    let mut driver = Driver::new(model);
    let mut d_prev = driver.state.d.clone();
    let mut splittings = Vec::with_capacity(n_increments);
    let mut failure = None;
    for index in 0..n_increments {
        let step = reduced_increment(
            model,
            control,
            config,
            &mut space,
            &mut weighted,
            &mut driver,
            &mut d_prev,
            index,
        );
        match step {
            Ok(split) => splittings.push(split),
            Err(e) => {
                failure = Some(e.at_increment(index));
                break;
            }
        }
    }
    let corrections = space
        .corrector()
        .map(|c| c.records().to_vec())
        .unwrap_or_default();
    let run = ReducedRun {
        history: driver.history,
        splittings,
        corrections,
        basis: space.basis().clone(),
    };
    Ok((run, failure))
}

#[allow(clippy::too_many_arguments)]
fn reduced_increment(
    model: &LatticeModel,
    control: &IncrementControl,
    config: &ReducedConfig,
    space: &mut LocalGlobalSpace,
    weighted: &mut WeightedBasis,
    driver: &mut Driver,
    d_prev: &mut Vec<f64>,
    index: usize,
) -> Result<Splitting> {
    let n_u = model.n_free();
    let split = match &config.splitting {
        SplittingPolicy::None => Splitting::empty(n_u, index),
        SplittingPolicy::All => Splitting::all(n_u, index),
        SplittingPolicy::Greedy(p) => {
            select_fully_resolved(model, d_prev, &driver.state.d, p, index)?
        }
    };
    debug!(
        "increment {index}: n_c {} n_f {}",
        space.basis().n_c(),
        split.n_f()
    );
    space.set_splitting(split.clone())?;
    if let Some(c) = space.corrector_mut() {
        c.begin_increment(index);
    }
    let step = controlled_step(
        model,
        space,
        &driver.state,
        &driver.u,
        driver.lambda,
        control,
        &driver.hints,
        driver.predictor.as_ref(),
        driver.load_scale(),
    )?;
    let du = step.du.clone();
    *d_prev = driver.state.d.clone();
    driver.commit(model, step);

    let raw = space
        .corrector_mut()
        .map(|c| c.take_vectors())
        .unwrap_or_default();
    if config.enrich {
        let mut extra = raw;
        extra.push(du);
        weighted.enrich(&extra)?;
        space.set_basis(weighted.basis().clone())?;
    } else if !raw.is_empty() {
        // keep the weights aligned with the grown basis for later re-sorts
        *weighted = WeightedBasis {
            basis: space.basis().clone(),
            weights: weighted
                .weights
                .iter()
                .copied()
                .chain(raw.iter().map(|v| v.norm()))
                .collect(),
        };
    }
    Ok(split)
}

/// Classic POD run: no resolved DOFs, no enrichment, no corrections.
pub fn run_pod(
    model: &LatticeModel,
    control: &IncrementControl,
    basis: ReducedBasis,
    n_increments: usize,
) -> Result<ReducedRun> {
    run_reduced(
        model,
        control,
        basis,
        &ReducedConfig::pod(),
        None,
        n_increments,
    )
}

/// Local/global run with greedy splitting and per-increment enrichment.
pub fn run_localglobal(
    model: &LatticeModel,
    control: &IncrementControl,
    basis: ReducedBasis,
    params: SplitParams,
    n_increments: usize,
) -> Result<ReducedRun> {
    run_reduced(
        model,
        control,
        basis,
        &ReducedConfig::localglobal(params),
        None,
        n_increments,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{build_frame_lattice, BoxRegion, FrameSpec, Layout};
    use crate::lattice::tangent_stiffness;
    use crate::nonlinear::newton_solve_full;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(n: usize, damage: bool) -> LatticeModel {
        let mut spec = FrameSpec::tower();
        spec.nx = n;
        spec.ny = n;
        spec.nz = n;
        spec.layout = Layout::Solid;
        spec.loaded_box = Some(BoxRegion {
            min: [0.0, 0.0, n as f64],
            max: [1.0, 1.0, n as f64],
        });
        spec.material.damage = damage;
        build_frame_lattice(&spec).unwrap()
    }

    fn e(n: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(n);
        v[i] = 1.0;
        v
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn coupling_hand_example() {
        let c = DMatrix::from_columns(&[e(3, 0)]);
        let split = Splitting::from_resolved(3, vec![2], 0).unwrap();
        let a = build_coupling_operator(&c, &split).unwrap();
        let v = a
            .apply(&DVector::from_vec(vec![5.0]), &DVector::from_vec(vec![7.0]))
            .unwrap();
        assert_eq!(v.as_slice(), &[5.0, 0.0, 7.0]);
        assert!(a.apply(&DVector::zeros(2), &DVector::zeros(1)).is_err());
        assert!(build_coupling_operator(&DMatrix::zeros(4, 1), &split).is_err());
    }

    #[test]
    fn degenerate_couplings() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_matrix(&mut rng, 5, 2);
        let alpha = DVector::from_vec(vec![0.3, -1.2]);
        let none = Splitting::empty(5, 0);
        let a = build_coupling_operator(&c, &none).unwrap();
        assert_eq!(a.apply(&alpha, &DVector::zeros(0)).unwrap(), &c * &alpha);
        let all = Splitting::all(5, 0);
        let a = build_coupling_operator(&c, &all).unwrap();
        let x = DVector::from_fn(5, |i, _| i as f64);
        assert_eq!(a.apply(&alpha, &x).unwrap(), x);
    }

    #[test]
    fn extractor_algebra_on_every_subset() {
        let n = 5;
        for mask in 0u32..(1 << n) {
            let resolved: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let s = Splitting::from_resolved(n, resolved, 0).unwrap();
            let ef =
                DMatrix::from_columns(&(0..n).map(|i| s.extract_f(&e(n, i))).collect::<Vec<_>>());
            let er =
                DMatrix::from_columns(&(0..n).map(|i| s.extract_r(&e(n, i))).collect::<Vec<_>>());
            let pr =
                DMatrix::from_columns(&(0..n).map(|i| s.project_r(&e(n, i))).collect::<Vec<_>>());
            assert_eq!(&ef * ef.transpose(), DMatrix::identity(s.n_f(), s.n_f()));
            assert_eq!(&er * er.transpose(), DMatrix::identity(s.n_r(), s.n_r()));
            assert_eq!(&pr * &pr, pr);
            assert_eq!(pr.transpose(), pr);
            assert_eq!(er.transpose() * &er, pr);
            assert_eq!((&pr * ef.transpose()).amax(), 0.0);
            assert_eq!(
                s.prolong_f(&s.extract_f(&e(n, 0))) + s.prolong_r(&s.extract_r(&e(n, 0))),
                e(n, 0)
            );
        }
    }

    #[test]
    fn reduced_residual_matches_dense_oracle() {
        let model = cube(2, false);
        let n_u = model.n_free();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = orthonormalize(&random_matrix(&mut rng, n_u, 3));
        let split = Splitting::from_resolved(n_u, vec![1, 4, 7, n_u - 1], 0).unwrap();
        let a = build_coupling_operator(&c, &split).unwrap();
        let state = DamageState::undamaged(model.n_bars());
        let u_n = DVector::from_fn(n_u, |_, _| rng.random_range(-0.01..0.01));
        let alpha = DVector::from_fn(3, |_, _| rng.random_range(-0.01..0.01));
        let du_f = DVector::from_fn(4, |_, _| rng.random_range(-0.01..0.01));
        let rr = reduced_residual(&a, &model, &state, &u_n, &alpha, &du_f, 0.7).unwrap();
        let ad = a.to_dense();
        let u = &u_n + &ad * concat(&alpha, &du_f);
        let full = internal_forces(&model, &u, &state) + model.unit_load() * 0.7;
        assert!((rr - ad.transpose() * full).amax() < 1e-12);

        let all = Splitting::all(n_u, 0);
        let a = build_coupling_operator(&c, &all).unwrap();
        let rr =
            reduced_residual(&a, &model, &state, &u_n, &alpha, &DVector::zeros(n_u), 0.7).unwrap();
        let full = internal_forces(&model, &u_n, &state) + model.unit_load() * 0.7;
        assert!((rr.rows(3, n_u) - full).amax() < 1e-15);
        assert_eq!(rr.rows(0, 3).amax(), 0.0);
    }

    #[test]
    fn reduced_tangent_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_matrix(&mut rng, 4, 4);
        let k = &m * m.transpose() + DMatrix::identity(4, 4);
        let c = orthonormalize(&random_matrix(&mut rng, 4, 1));
        let split = Splitting::from_resolved(4, vec![2], 0).unwrap();
        let a = build_coupling_operator(&c, &split).unwrap();
        let blocks = reduced_tangent(&a, &CsrMatrix::from_dense(&k)).unwrap();
        let ad = a.to_dense();
        let oracle = ad.transpose() * &k * &ad;
        assert!((blocks.to_dense() - oracle).amax() < 1e-12);
        assert_eq!(blocks.kff.get(0, 0), k[(2, 2)]);

        // full orthonormal basis without resolved DOFs: similar to K
        let q = orthonormalize(&random_matrix(&mut rng, 4, 4));
        let none = Splitting::empty(4, 0);
        let a = build_coupling_operator(&q, &none).unwrap();
        let blocks = reduced_tangent(&a, &CsrMatrix::from_dense(&k)).unwrap();
        let mut ev1: Vec<f64> = blocks
            .krr
            .clone()
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .collect();
        let mut ev2: Vec<f64> = k.clone().symmetric_eigenvalues().iter().copied().collect();
        ev1.sort_by(f64::total_cmp);
        ev2.sort_by(f64::total_cmp);
        for (x, y) in ev1.iter().zip(&ev2) {
            assert!((x - y).abs() < 1e-10 * y.abs());
        }
        assert_eq!(blocks.n_f(), 0);
    }

    #[test]
    fn splitting_around_one_damaged_bar() {
        let model = cube(4, true);
        let bar = model
            .bars()
            .iter()
            .position(|b| {
                let p = model.bar_midpoint(b.id);
                (p - nalgebra::Vector3::new(2.0, 2.0, 2.5)).norm() < 1e-12
            })
            .unwrap();
        let d_prev = vec![0.0; model.n_bars()];
        let mut d_curr = d_prev.clone();
        d_curr[bar] = 0.1;
        let params = SplitParams {
            rho_s: 1.5,
            k_dam: 0.5,
            k_locglo: 1.0,
        };
        let s = select_fully_resolved(&model, &d_prev, &d_curr, &params, 3).unwrap();
        let centre = model.bar_midpoint(bar);
        let mut expected: Vec<usize> = model
            .nodes()
            .iter()
            .filter(|n| (n.position - centre).norm() <= 1.5)
            .flat_map(|n| (0..3).map(move |c| 3 * n.id + c))
            .filter_map(|dof| model.free_index(dof))
            .collect();
        expected.sort_unstable();
        assert_eq!(s.fully_resolved, expected);
        assert_eq!(s.epoch, 3);
        // 9 nodes in each of the two end layers plus the two on the axis at 1.5
        assert_eq!(s.n_f(), 3 * 20);
    }

    #[test]
    fn no_damage_increment_gives_empty_splitting() {
        let model = cube(3, true);
        let d = vec![0.2; model.n_bars()];
        let s = select_fully_resolved(&model, &d, &d, &SplitParams::default(), 0).unwrap();
        assert_eq!(s.n_f(), 0);
        assert_eq!(s.n_r(), model.n_free());
    }

    #[test]
    fn uniform_damage_stops_at_the_cap() {
        let model = cube(5, true);
        let d_prev = vec![0.0; model.n_bars()];
        let d_curr = vec![0.1; model.n_bars()];
        let params = SplitParams {
            rho_s: 1.0,
            k_dam: 0.5,
            k_locglo: 0.1,
        };
        let s = select_fully_resolved(&model, &d_prev, &d_curr, &params, 0).unwrap();
        let cap = 0.1 * model.n_free() as f64;
        assert!(s.n_f() as f64 > cap);
        // a unit sphere around a bar midpoint holds at most 2 + 8 nodes
        assert!((s.n_f() as f64) <= cap + 30.0);
    }

    #[test]
    fn invalid_split_params() {
        let bad = SplitParams {
            k_dam: 0.0,
            ..SplitParams::default()
        };
        assert!(bad.validate().is_err());
        assert!(SplitParams::default().validate().is_ok());
    }

    #[test]
    fn enrichment_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = random_matrix(&mut rng, 8, 3);
        let s = SnapshotMatrix::from_columns(base.clone());
        let (_, b0) = enrich_basis(&s, &[], Truncation::Full).unwrap();
        let inside = &base * DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let (_, b1) = enrich_basis(&s, &[inside], Truncation::Full).unwrap();
        assert_eq!(b1.n_c(), b0.n_c());
        let (_, b2) = enrich_basis(&s, &[DVector::zeros(8)], Truncation::Full).unwrap();
        assert_eq!(b2.n_c(), 3);
        assert!((b2.lambdas()[..3].iter().zip(&b0.lambdas()[..3]))
            .all(|(a, b)| (a - b).abs() < 1e-10 * b));
        let q = orthonormalize(&base);
        let mut outside = random_matrix(&mut rng, 8, 1).column(0).into_owned();
        outside -= &q * q.tr_mul(&outside);
        let (_, b3) = enrich_basis(&s, &[outside], Truncation::Full).unwrap();
        assert_eq!(b3.n_c(), 4);
        assert!(b3.orthonormality_error() < 1e-10);
    }

    #[test]
    fn weighted_enrichment_keeps_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = SnapshotMatrix::from_columns(random_matrix(&mut rng, 10, 4));
        let basis = compute_pod_basis(&s, Truncation::Order(2)).unwrap();
        let mut w = WeightedBasis::new(basis.clone());
        let inside = basis.matrix() * DVector::from_vec(vec![3.0, 1.0]);
        w.enrich(&[inside]).unwrap();
        assert_eq!(w.basis().n_c(), 2);
        let p = w.basis().matrix() * w.basis().matrix().transpose();
        assert!((&p * basis.matrix() - basis.matrix()).amax() < 1e-12);
        w.enrich(&[random_matrix(&mut rng, 10, 1).column(0).into_owned()])
            .unwrap();
        assert_eq!(w.basis().n_c(), 3);
        assert!(w.basis().orthonormality_error() < 1e-10);
    }

    #[test]
    fn fully_resolved_newton_matches_full_newton() {
        let model = cube(3, true);
        let n_u = model.n_free();
        let state = DamageState::undamaged(model.n_bars());
        let u0 = DVector::zeros(n_u);
        let cg = CgOptions {
            tol: 1e-14,
            max_iters: 10 * n_u,
            reorthogonalize: false,
        };
        let basis =
            ReducedBasis::from_columns(&DMatrix::from_columns(&[model.unit_load().clone()]));
        let (du, metrics) = newton_solve_localglobal(
            &model,
            &state,
            &u0,
            &basis,
            &Splitting::all(n_u, 0),
            0.05,
            1e-12,
            30,
            &cg,
        )
        .unwrap();
        let (du_full, iters) = newton_solve_full(&model, &state, &u0, 0.05, 1e-12, 30).unwrap();
        assert_eq!(metrics.newton_iters, iters);
        assert!((du - &du_full).amax() <= 1e-10 * du_full.amax());
    }

    #[test]
    fn exact_basis_converges_in_one_iteration() {
        let model = cube(3, false);
        let n_u = model.n_free();
        let state = DamageState::undamaged(model.n_bars());
        let u0 = DVector::zeros(n_u);
        let (exact, _) = newton_solve_full(&model, &state, &u0, 1.0, 1e-13, 5).unwrap();
        let basis = ReducedBasis::from_columns(&DMatrix::from_columns(std::slice::from_ref(&exact)));
        let (du, metrics) = newton_solve_localglobal(
            &model,
            &state,
            &u0,
            &basis,
            &Splitting::empty(n_u, 0),
            1.0,
            1e-10,
            5,
            &CgOptions::default(),
        )
        .unwrap();
        assert_eq!(metrics.newton_iters, 1);
        assert!(metrics.linear_solves.iter().all(|r| r.iterations == 0));
        assert!((du - &exact).norm() < 1e-10 * exact.norm());
    }

    #[test]
    fn condensed_solve_matches_galerkin_oracle() {
        let model = cube(3, true);
        let n_u = model.n_free();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = orthonormalize(&random_matrix(&mut rng, n_u, 4));
        let split = Splitting::from_resolved(n_u, (0..n_u).step_by(5).collect(), 0).unwrap();
        let state = DamageState::undamaged(model.n_bars());
        let k = tangent_stiffness(&model, &DVector::zeros(n_u), &state, TangentMode::Secant);
        let cg = CgOptions {
            tol: 1e-13,
            ..CgOptions::default()
        };
        let mut space = LocalGlobalSpace::new(ReducedBasis::from_columns(&c), split.clone(), cg)
            .unwrap()
            .measure_unaugmented(true);
        let r = model.unit_load().clone();
        let v = space
            .solve(&k, TangentMode::Secant, std::slice::from_ref(&r), 0)
            .unwrap()
            .remove(0);
        let a = build_coupling_operator(&c, &split).unwrap().to_dense();
        let kd = k.to_dense();
        let y = (a.transpose() * &kd * &a)
            .lu()
            .solve(&(a.transpose() * &r))
            .unwrap();
        let oracle = &a * y;
        assert!((v - &oracle).norm() < 1e-8 * oracle.norm());
        let rec = space.take_records();
        assert_eq!(rec.len(), 1);
        assert!(rec[0].iterations <= rec[0].unaugmented_iterations.unwrap());
    }
}
