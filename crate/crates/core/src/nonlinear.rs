//! Quasi-static incremental solution with damage-controlled continuation.
//!
//! Each increment solves the balance equations together with a scalar
//! constraint fixing the maximum damage increment: the loading function of a
//! control bar is driven to `d_n + delta_d_max` while the load factor is a
//! free unknown (a bordered Newton system). The control bar is re-selected
//! until it is the one with the largest damage increment. Because the damage
//! is the control variable, the load factor can fall after the limit point
//! without any special treatment.
//!
//! The Newton engine is written once against [`LinearizedSpace`], which hides
//! whether the corrections live in the full space, a POD space, or the mixed
//! local/global space.

use log::{debug, trace};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{internal_forces, tangent_stiffness, DamageState, LatticeModel, TangentMode};
use crate::pod::SnapshotMatrix;
use crate::skyline::{rcm_order, SkylineLdlt};
use crate::sparse::CsrMatrix;

/// Tolerance on the control constraint `phi_b(U) - target`.
const CONSTRAINT_TOL: f64 = 1e-11;
/// Relative slack accepted on the max damage increment of non-control bars.
const CONTROL_SLACK: f64 = 1e-3;
const MAX_CONTROL_SWITCHES: usize = 20;
/// Previous-increment leaders tried as control bars before giving up.
const MAX_START_BARS: usize = 4;
const LINE_SEARCH_STEPS: usize = 8;
const MAX_RAMP_DEPTH: usize = 4;
/// Iterations without a 10% merit decrease before Newton is judged stuck.
const STALL_WINDOW: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncrementControl {
    pub delta_d_max: f64,
    #[serde(default = "default_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_iters")]
    pub newton_max_iters: usize,
    /// Admissible range of the load factor; leaving it is a control failure.
    #[serde(default = "default_bounds")]
    pub load_bounds: (f64, f64),
}

fn default_tol() -> f64 {
    1e-8
}

fn default_iters() -> usize {
    150
}

fn default_bounds() -> (f64, f64) {
    (-1e-6, 1e6)
}

impl IncrementControl {
    pub fn new(delta_d_max: f64) -> Self {
        Self {
            delta_d_max,
            newton_tol: default_tol(),
            newton_max_iters: default_iters(),
            load_bounds: default_bounds(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_d_max > 0.0 && self.delta_d_max <= 1.0) {
            return Err(Error::InvalidModel(format!(
                "delta_d_max {} outside (0, 1]",
                self.delta_d_max
            )));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iters == 0 {
            return Err(Error::InvalidModel(
                "Newton tolerance and iteration cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for IncrementControl {
    fn default() -> Self {
        Self::new(0.1)
    }
}

/// One linear solve performed inside a Newton iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearSolveRecord {
    pub newton_iter: usize,
    /// CG iterations (0 for direct solves and for systems without master DOFs).
    pub iterations: usize,
    /// CG iterations of the same system without augmentation, when measured.
    pub unaugmented_iterations: Option<usize>,
    /// The condensed operator was factorized directly after CG failed on it.
    #[serde(default)]
    pub direct: bool,
    /// `|S_P x - R_C| / |R_C|` after each CG iteration, starting with the
    /// coarse initialization.
    pub residual_history: Vec<f64>,
    pub n_c: usize,
    pub n_f: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IncrementMetrics {
    pub newton_iters: usize,
    pub control_bar: Option<usize>,
    pub control_switches: usize,
    pub secant_fallbacks: usize,
    /// Relative norm of the projected residual at convergence.
    pub reduced_residual: f64,
    /// Relative norm of the full residual at convergence.
    pub full_residual: f64,
    pub n_c: usize,
    pub n_f: usize,
    pub linear_solves: Vec<LinearSolveRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncrementRecord {
    pub index: usize,
    pub u: DVector<f64>,
    pub du: DVector<f64>,
    pub damage: DamageState,
    pub load_factor: f64,
    pub deflection: f64,
    pub metrics: IncrementMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotKind {
    /// Converged displacement increments.
    #[default]
    Increment,
    /// Converged total displacements.
    Total,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveHistory {
    pub increments: Vec<IncrementRecord>,
}

impl SolveHistory {
    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// (deflection, load factor) per increment.
    pub fn load_deflection(&self) -> Vec<(f64, f64)> {
        self.increments
            .iter()
            .map(|r| (r.deflection, r.load_factor))
            .collect()
    }

    pub fn peak_load(&self) -> f64 {
        self.increments
            .iter()
            .map(|r| r.load_factor)
            .fold(0.0, f64::max)
    }

    pub fn snapshots(&self, kind: SnapshotKind, source: &str) -> Option<SnapshotMatrix> {
        let first = self.increments.first()?;
        let mut s = SnapshotMatrix::new(first.u.len());
        for r in &self.increments {
            let v = match kind {
                SnapshotKind::Increment => &r.du,
                SnapshotKind::Total => &r.u,
            };
            s.push(v, format!("{source}:{}", r.index))
                .expect("consistent lengths");
        }
        Some(s)
    }
}

/// State handed to [`LinearizedSpace::gate`] once per Newton iteration.
pub struct GateContext<'a> {
    pub model: &'a LatticeModel,
    pub u: &'a DVector<f64>,
    pub trial: &'a DamageState,
    /// `-R = f - lambda F_unit` on the full free DOFs.
    pub residual: &'a DVector<f64>,
    pub reduced_rel: f64,
    pub full_rel: f64,
    pub newton_iter: usize,
}

/// Space in which the Newton corrections are sought.
pub trait LinearizedSpace {
    /// `|A^T v|` for a full free-DOF vector `v`.
    fn restrict_norm(&self, v: &DVector<f64>) -> f64;

    /// For each right-hand side `r`, returns `A y` with `(A^T K A) y = A^T r`.
    /// `mode` says how `k` was assembled; a space may reject a consistent
    /// tangent it cannot handle with a recoverable error, and the caller
    /// then retries with the secant one.
    fn solve(
        &mut self,
        k: &CsrMatrix,
        mode: TangentMode,
        rhs: &[DVector<f64>],
        newton_iter: usize,
    ) -> Result<Vec<DVector<f64>>>;

    /// Called after the residuals of each Newton iteration are known. Returns
    /// true when the space was modified, in which case the iteration is
    /// restarted with the new space.
    fn gate(&mut self, _ctx: &GateContext) -> Result<bool> {
        Ok(false)
    }

    fn dims(&self) -> (usize, usize);

    fn take_records(&mut self) -> Vec<LinearSolveRecord>;
}

/// Full-order space: skyline LDL^T with an RCM ordering computed once.
#[derive(Debug, Default)]
pub struct FullSpace {
    order: Option<Vec<usize>>,
    records: Vec<LinearSolveRecord>,
}

impl FullSpace {
    pub fn new() -> Self {
        Self::default()
    }
}

impl LinearizedSpace for FullSpace {
    fn restrict_norm(&self, v: &DVector<f64>) -> f64 {
        v.norm()
    }

    fn solve(
        &mut self,
        k: &CsrMatrix,
        _mode: TangentMode,
        rhs: &[DVector<f64>],
        newton_iter: usize,
    ) -> Result<Vec<DVector<f64>>> {
        let order = self.order.get_or_insert_with(|| rcm_order(k)).clone();
        let f = SkylineLdlt::factor_with_order(k, order)?;
        self.records.push(LinearSolveRecord {
            newton_iter,
            n_f: k.nrows(),
            ..Default::default()
        });
        Ok(rhs.iter().map(|r| f.solve(r)).collect())
    }

    fn dims(&self) -> (usize, usize) {
        (0, usize::MAX)
    }

    fn take_records(&mut self) -> Vec<LinearSolveRecord> {
        std::mem::take(&mut self.records)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Constraint {
    Load(f64),
    Damage { bar: usize, target: f64 },
}

#[derive(Debug, Clone)]
pub(crate) struct NewtonOutcome {
    pub du: DVector<f64>,
    pub load_factor: f64,
    pub iterations: usize,
    pub reduced_rel: f64,
    pub full_rel: f64,
    pub secant_fallbacks: usize,
}

fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::SingularTangent { .. }
            | Error::SingularKrr
            | Error::SingularCoarse
            | Error::BreakdownNonSpd { .. }
            | Error::NonPositiveDiagonal { .. }
            | Error::CgNotConverged { .. }
    )
}

/// Newton iterations on `f(U_n + dU) - lambda F_unit = 0` completed by the
/// constraint. The damage history of `committed` is held fixed; the damage
/// used in each residual follows the current iterate.
#[allow(clippy::too_many_arguments)]
pub(crate) fn newton_increment<S: LinearizedSpace + ?Sized>(
    model: &LatticeModel,
    space: &mut S,
    committed: &DamageState,
    u_n: &DVector<f64>,
    mut du: DVector<f64>,
    mut lambda: f64,
    constraint: Constraint,
    tol: f64,
    max_iters: usize,
    load_scale: f64,
) -> Result<NewtonOutcome> {
    let f_unit = model.unit_load().clone();
    if let Constraint::Load(l) = constraint {
        lambda = l;
    }
    let mut secant_fallbacks = 0;
    let mut iter = 0;
    let mut last_rel;
    let mut merits: Vec<f64> = Vec::new();
    let mut window_start = 0;
    let mut secant_mode = false;
    loop {
        let u = u_n + &du;
        let trial = committed.trial(model, &u);
        let g = -internal_forces(model, &u, &trial) - &f_unit * lambda;
        let denom = lambda.abs().max(load_scale).max(f64::MIN_POSITIVE);
        let reduced_rel = space.restrict_norm(&g) / denom;
        let full_rel = g.norm() / denom;
        let (c, grad) = match constraint {
            Constraint::Load(_) => (0.0, Vec::new()),
            Constraint::Damage { bar, target } => {
                let (phi, grad) = model.loading_gradient(bar, &u);
                (phi - target, grad)
            }
        };
        trace!("newton {iter}: reduced {reduced_rel:.3e} full {full_rel:.3e} constraint {c:.3e}");
        last_rel = reduced_rel;

        let ctx = GateContext {
            model,
            u: &u,
            trial: &trial,
            residual: &g,
            reduced_rel,
            full_rel,
            newton_iter: iter,
        };
        if space.gate(&ctx)? {
            iter += 1;
            if iter > max_iters {
                break;
            }
            continue;
        }
        if reduced_rel <= tol && c.abs() <= CONSTRAINT_TOL {
            return Ok(NewtonOutcome {
                du,
                load_factor: lambda,
                iterations: iter,
                reduced_rel,
                full_rel,
                secant_fallbacks,
            });
        }
        if iter >= max_iters {
            break;
        }

        let mut rhs = vec![-&g];
        if matches!(constraint, Constraint::Damage { .. }) {
            rhs.push(f_unit.clone());
        }
        // consistent first, secant when the linear solve cannot handle it
        // or when Newton stalls in the second half of the budget
        let merit_now = reduced_rel + c.abs();
        merits.push(merit_now);
        if merits.len() - window_start > STALL_WINDOW {
            let split = merits.len() - STALL_WINDOW;
            let before = merits[window_start..split]
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            let recent = merits[split..]
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min);
            if recent > 0.9 * before {
                if secant_mode {
                    debug!("newton stagnating at {merit_now:.3e}, giving up");
                    break;
                }
                debug!("newton stagnating at {merit_now:.3e}, switching to secant");
                secant_mode = true;
                window_start = merits.len() - 1;
            }
        }
        let stalled = secant_mode || iter >= max_iters / 2;
        let mode = if stalled {
            TangentMode::Secant
        } else {
            TangentMode::Consistent
        };
        let k = tangent_stiffness(model, &u, &trial, mode);
        let sol = match space.solve(&k, mode, &rhs, iter) {
            Ok(s) => s,
            Err(e) if recoverable(&e) && mode == TangentMode::Consistent => {
                debug!("consistent tangent rejected ({e}), using secant");
                secant_fallbacks += 1;
                let k = tangent_stiffness(model, &u, &trial, TangentMode::Secant);
                space.solve(&k, TangentMode::Secant, &rhs, iter)?
            }
            Err(e) => return Err(e),
        };
        let (step_u, step_lambda) = match constraint {
            Constraint::Load(_) => (sol[0].clone(), 0.0),
            Constraint::Damage { .. } => {
                let dot = |v: &DVector<f64>| grad.iter().map(|&(i, w)| w * v[i]).sum::<f64>();
                let gb = dot(&sol[1]);
                if gb.abs() < f64::EPSILON * sol[1].norm() * grad_norm(&grad) {
                    return Err(Error::ControlFailure(
                        "control bar is insensitive to the load".into(),
                    ));
                }
                let dlambda = (-c - dot(&sol[0])) / gb;
                (&sol[0] + &sol[1] * dlambda, dlambda)
            }
        };

        // backtracking on |A^T R| + |c|: the damage law has kinks (loading
        // to unloading, d reaching 1) across which full steps can cycle
        let merit0 = reduced_rel + c.abs();
        let merit_at = |space: &S, a: f64| {
            let du_a = &du + &step_u * a;
            let lambda_a = lambda + step_lambda * a;
            let u_a = u_n + &du_a;
            let trial_a = committed.trial(model, &u_a);
            let g_a = -internal_forces(model, &u_a, &trial_a) - &f_unit * lambda_a;
            let denom_a = lambda_a.abs().max(load_scale).max(f64::MIN_POSITIVE);
            let c_a = match constraint {
                Constraint::Load(_) => 0.0,
                Constraint::Damage { bar, target } => model.loading_gradient(bar, &u_a).0 - target,
            };
            space.restrict_norm(&g_a) / denom_a + c_a.abs()
        };
        let mut alpha = 1.0;
        let mut best = (1.0, f64::INFINITY);
        for _ in 0..LINE_SEARCH_STEPS {
            let m = merit_at(space, alpha);
            if m < best.1 {
                best = (alpha, m);
            }
            if m <= (1.0 - 1e-4 * alpha) * merit0 {
                break;
            }
            alpha *= 0.5;
        }
        let alpha = if best.1 < merit0 { best.0 } else { 1.0 };
        if alpha < 1.0 {
            trace!("line search step {alpha}");
        }
        du += &step_u * alpha;
        lambda += step_lambda * alpha;
        iter += 1;
    }
    Err(Error::NonConvergence {
        iterations: iter,
        residual: last_rel,
    })
}

fn grad_norm(grad: &[(usize, f64)]) -> f64 {
    grad.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()
}

/// Converged result of one damage-controlled increment.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub load_factor: f64,
    pub du: DVector<f64>,
    pub state: DamageState,
    pub metrics: IncrementMetrics,
}

/// Bars that can still take the full damage increment, with nonzero strain.
fn candidates(
    model: &LatticeModel,
    state: &DamageState,
    u: &DVector<f64>,
    delta: f64,
) -> Vec<usize> {
    let strains = model.strains(u);
    (0..model.n_bars())
        .filter(|&b| state.d[b] + delta <= 1.0 + 1e-12 && strains[b] != 0.0)
        .collect()
}

/// First bar to reach its target along the tangent load direction at `u`.
fn predict_control_bar<S: LinearizedSpace + ?Sized>(
    model: &LatticeModel,
    space: &mut S,
    state: &DamageState,
    u: &DVector<f64>,
    delta: f64,
    pool: &[usize],
) -> Result<usize> {
    let trial = state.trial(model, u);
    let k = tangent_stiffness(model, u, &trial, TangentMode::Secant);
    let t = space
        .solve(
            &k,
            TangentMode::Secant,
            std::slice::from_ref(model.unit_load()),
            0,
        )?
        .remove(0);
    let mut best = None;
    for &b in pool {
        let (phi, grad) = model.loading_gradient(b, u);
        let rate: f64 = grad.iter().map(|&(i, w)| w * t[i]).sum();
        let shifted = if phi == 0.0 {
            // loading function is not differentiable at zero strain: use the
            // degree-one homogeneity of alpha sqrt(Y) along the elastic path
            let (phi_t, _) = model.loading_gradient(b, &(u + &t));
            phi_t
        } else {
            rate
        };
        if shifted <= 0.0 {
            continue;
        }
        let gap = (state.d[b] + delta).max(state.history[b]) - phi;
        let need = gap.max(0.0) / shifted;
        if best.is_none_or(|(_, n)| need < n) {
            best = Some((b, need));
        }
    }
    best.map(|(b, _)| b)
        .ok_or_else(|| Error::ControlFailure("no bar is loaded by the applied forces".into()))
}

/// Start point for a control bar whose strain vanishes at `u_n`, where the
/// loading function has no usable gradient: march along the secant response
/// to a unit load until the bar reaches `target`.
fn elastic_predictor<S: LinearizedSpace + ?Sized>(
    model: &LatticeModel,
    space: &mut S,
    state: &DamageState,
    u_n: &DVector<f64>,
    bar: usize,
    target: f64,
) -> Result<Option<(DVector<f64>, f64)>> {
    if model.loading_gradient(bar, u_n).0 > 0.0 {
        return Ok(None);
    }
    let trial = state.trial(model, u_n);
    let k = tangent_stiffness(model, u_n, &trial, TangentMode::Secant);
    let t = space
        .solve(
            &k,
            TangentMode::Secant,
            std::slice::from_ref(model.unit_load()),
            0,
        )?
        .remove(0);
    let phi = |s: f64| model.loading_gradient(bar, &(u_n + &t * s)).0;
    let mut hi = 1.0;
    while phi(hi) < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Ok(None);
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if phi(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(Some((&t * hi, hi)))
}

/// One damage-controlled increment in an arbitrary space.
///
/// `hints` ranks bars by their damage increment in the previous increment;
/// the leading ones that can still take a full increment are tried as control
/// bars first, then the bar predicted from the tangent load response.
#[allow(clippy::too_many_arguments)]
pub(crate) fn controlled_step<S: LinearizedSpace + ?Sized>(
    model: &LatticeModel,
    space: &mut S,
    state: &DamageState,
    u_n: &DVector<f64>,
    lambda_n: f64,
    control: &IncrementControl,
    hints: &[usize],
    predictor: Option<&(DVector<f64>, f64)>,
    load_scale: f64,
) -> Result<StepResult> {
    control.validate()?;
    if !model.material().damage {
        return Err(Error::ControlFailure(
            "damage is disabled, nothing to control".into(),
        ));
    }
    let delta = control.delta_d_max;
    let pool: Vec<usize> = (0..model.n_bars())
        .filter(|&b| state.d[b] + delta <= 1.0 + 1e-12)
        .collect();
    if pool.is_empty() {
        return Err(Error::ControlFailure(
            "every bar is within one increment of full failure".into(),
        ));
    }
    let loaded = candidates(model, state, u_n, delta);
    let mut starts: Vec<usize> = hints
        .iter()
        .copied()
        .filter(|b| loaded.contains(b))
        .take(MAX_START_BARS)
        .collect();
    if starts.is_empty() {
        starts.push(predict_control_bar(model, space, state, u_n, delta, &pool)?);
    }

    let mut metrics = IncrementMetrics::default();
    let mut last_err = None;
    for &first in &starts {
        match attempt(
            model,
            space,
            state,
            u_n,
            lambda_n,
            control,
            first,
            predictor,
            load_scale,
            &mut metrics,
        ) {
            Ok((du, lambda)) => {
                if lambda < control.load_bounds.0 || lambda > control.load_bounds.1 {
                    return Err(Error::ControlFailure(format!(
                        "load factor {lambda:e} left the admissible range {:?}",
                        control.load_bounds
                    )));
                }
                let u = u_n + &du;
                let new_state = crate::lattice::update_damage(state, model, &u);
                let (n_c, n_f) = space.dims();
                metrics.n_c = n_c;
                metrics.n_f = n_f.min(model.n_free());
                metrics.linear_solves = space.take_records();
                return Ok(StepResult {
                    load_factor: lambda,
                    du,
                    state: new_state,
                    metrics,
                });
            }
            Err(e) => {
                debug!("control from bar {first} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    space.take_records();
    Err(last_err.expect("at least one start bar"))
}

/// Solves the increment starting with control bar `first`, switching to
/// whichever bar overshoots the damage increment until none does.
#[allow(clippy::too_many_arguments)]
fn attempt<S: LinearizedSpace + ?Sized>(
    model: &LatticeModel,
    space: &mut S,
    state: &DamageState,
    u_n: &DVector<f64>,
    lambda_n: f64,
    control: &IncrementControl,
    first: usize,
    predictor: Option<&(DVector<f64>, f64)>,
    load_scale: f64,
    metrics: &mut IncrementMetrics,
) -> Result<(DVector<f64>, f64)> {
    let delta = control.delta_d_max;
    let mut bar = first;
    let cold = match elastic_predictor(model, space, state, u_n, bar, state.d[bar] + delta)? {
        Some(s) => s,
        None => (DVector::zeros(model.n_free()), lambda_n),
    };
    let warm = predictor
        .filter(|_| cold.0.norm() == 0.0)
        .map(|(du, dl)| (du.clone(), lambda_n + dl));
    let (mut du, mut lambda) = warm.clone().unwrap_or_else(|| cold.clone());
    let mut tried = vec![bar];
    loop {
        let target = state.d[bar] + delta;
        let mut ctx = RampContext {
            model,
            state,
            u_n,
            control,
            bar,
            load_scale,
            furthest: None,
        };
        let solved = match ctx.solve(space, du.clone(), lambda, target, 0) {
            Err(e) if du != cold.0 => {
                // warm starts can sit outside the basin of the new target
                debug!("warm start failed ({e}), restarting increment from rest");
                let warm_furthest = ctx.furthest.take();
                let r = ctx.solve(space, cold.0.clone(), cold.1, target, 0);
                if ctx.furthest.is_none() {
                    ctx.furthest = warm_furthest;
                }
                r
            }
            other => other,
        };
        let out = match solved {
            Ok(o) => o,
            Err(e) => {
                // the path can turn back in the control bar's damage while a
                // neighbour keeps softening: hand control to the leading bar
                // from the furthest point reached
                let Some((du_p, lambda_p)) = ctx.furthest.take() else {
                    return Err(e);
                };
                let trial = state.trial(model, &(u_n + &du_p));
                let (lead, lead_inc) = leading_bar(state, &trial, bar);
                let own = trial.d[bar] - state.d[bar];
                if lead_inc <= own
                    || tried.contains(&lead)
                    || metrics.control_switches >= MAX_CONTROL_SWITCHES
                {
                    return Err(e);
                }
                debug!(
                    "control of bar {bar} stalled at {own:.4}, bar {lead} leads with {lead_inc:.4}"
                );
                metrics.control_switches += 1;
                bar = lead;
                tried.push(bar);
                du = du_p;
                lambda = lambda_p;
                continue;
            }
        };
        metrics.newton_iters += out.iterations;
        metrics.secant_fallbacks += out.secant_fallbacks;
        metrics.reduced_residual = out.reduced_rel;
        metrics.full_residual = out.full_rel;
        du = out.du;
        lambda = out.load_factor;

        let u = u_n + &du;
        let trial = state.trial(model, &u);
        let (worst, worst_inc) = leading_bar(state, &trial, bar);
        if worst_inc <= delta * (1.0 + CONTROL_SLACK) {
            metrics.control_bar = Some(bar);
            return Ok((du, lambda));
        }
        if tried.contains(&worst) || metrics.control_switches >= MAX_CONTROL_SWITCHES {
            return Err(Error::ControlFailure(format!(
                "control bar selection cycles between {bar} and {worst}"
            )));
        }
        debug!("bar {worst} exceeds the damage increment ({worst_inc:.4}), switching control from {bar}");
        metrics.control_switches += 1;
        bar = worst;
        tried.push(bar);
    }
}

/// Bar other than `bar` with the largest damage increment.
fn leading_bar(state: &DamageState, trial: &DamageState, bar: usize) -> (usize, f64) {
    (0..state.d.len())
        .filter(|&b| b != bar)
        .map(|b| (b, trial.d[b] - state.d[b]))
        .fold(
            (bar, f64::NEG_INFINITY),
            |acc, x| if x.1 > acc.1 { x } else { acc },
        )
}

struct RampContext<'a> {
    model: &'a LatticeModel,
    state: &'a DamageState,
    u_n: &'a DVector<f64>,
    control: &'a IncrementControl,
    bar: usize,
    load_scale: f64,
    /// Last converged point of the homotopy, kept when it fails later on.
    furthest: Option<(DVector<f64>, f64)>,
}

impl RampContext<'_> {
    /// Newton on the control target; when it fails, the target is reached
    /// through intermediate targets (a homotopy on the constraint only, the
    /// committed history is untouched so the final equations are the same).
    fn solve<S: LinearizedSpace + ?Sized>(
        &mut self,
        space: &mut S,
        du: DVector<f64>,
        lambda: f64,
        target: f64,
        depth: usize,
    ) -> Result<NewtonOutcome> {
        let result = newton_increment(
            self.model,
            space,
            self.state,
            self.u_n,
            du.clone(),
            lambda,
            Constraint::Damage {
                bar: self.bar,
                target,
            },
            self.control.newton_tol,
            self.control.newton_max_iters,
            self.load_scale,
        );
        match result {
            Ok(o) => {
                self.furthest = Some((o.du.clone(), o.load_factor));
                Ok(o)
            }
            Err(e) if depth < MAX_RAMP_DEPTH && matches!(e, Error::NonConvergence { .. }) => {
                let phi0 = self.model.loading_gradient(self.bar, &(self.u_n + &du)).0;
                let mid = 0.5 * (phi0 + target);
                if (target - mid).abs() < 1e-6 * self.control.delta_d_max {
                    return Err(e);
                }
                trace!("splitting control target of bar {} at {mid:.5}", self.bar);
                let a = self.solve(space, du, lambda, mid, depth + 1)?;
                let trial = self.state.trial(self.model, &(self.u_n + &a.du));
                if leading_bar(self.state, &trial, self.bar).1
                    > self.control.delta_d_max * (1.0 + CONTROL_SLACK)
                {
                    // another bar already took the whole increment: the
                    // caller switches control from this point
                    return Ok(a);
                }
                let mut b = self.solve(space, a.du, a.load_factor, target, depth + 1)?;
                b.iterations += a.iterations;
                b.secant_fallbacks += a.secant_fallbacks;
                Ok(b)
            }
            other => other,
        }
    }
}

/// Equilibrium at a prescribed load factor in the full space. Returns the
/// displacement increment from `u_prev` and the number of Newton iterations.
pub fn newton_solve_full(
    model: &LatticeModel,
    state: &DamageState,
    u_prev: &DVector<f64>,
    load_factor: f64,
    tol: f64,
    max_iters: usize,
) -> Result<(DVector<f64>, usize)> {
    let mut space = FullSpace::new();
    let out = newton_increment(
        model,
        &mut space,
        state,
        u_prev,
        DVector::zeros(model.n_free()),
        load_factor,
        Constraint::Load(load_factor),
        tol,
        max_iters,
        0.0,
    )?;
    Ok((out.du, out.iterations))
}

/// One full-order damage-controlled increment from the converged state
/// `(u_prev, lambda_prev, state)`.
pub fn arc_length_step(
    model: &LatticeModel,
    state: &DamageState,
    u_prev: &DVector<f64>,
    lambda_prev: f64,
    control: &IncrementControl,
) -> Result<StepResult> {
    let mut space = FullSpace::new();
    controlled_step(
        model,
        &mut space,
        state,
        u_prev,
        lambda_prev,
        control,
        &[],
        None,
        0.0,
    )
}

/// Bookkeeping shared by every incremental driver.
pub(crate) struct Driver {
    pub state: DamageState,
    pub u: DVector<f64>,
    pub lambda: f64,
    pub peak: f64,
    /// Bars ranked by damage increment in the last committed increment.
    pub hints: Vec<usize>,
    /// Last converged (dU, d lambda), the secant predictor of the next one.
    pub predictor: Option<(DVector<f64>, f64)>,
    pub history: SolveHistory,
}

impl Driver {
    pub fn new(model: &LatticeModel) -> Self {
        Self {
            state: DamageState::undamaged(model.n_bars()),
            u: DVector::zeros(model.n_free()),
            lambda: 0.0,
            peak: 0.0,
            hints: Vec::new(),
            predictor: None,
            history: SolveHistory::default(),
        }
    }

    /// Denominator floor for relative residuals once the load has peaked.
    pub fn load_scale(&self) -> f64 {
        1e-2 * self.peak
    }

    pub fn commit(&mut self, model: &LatticeModel, step: StepResult) {
        let prev = self.state.clone();
        self.u += &step.du;
        self.predictor = Some((step.du.clone(), step.load_factor - self.lambda));
        self.lambda = step.load_factor;
        self.peak = self.peak.max(self.lambda.abs());
        let mut ranked: Vec<usize> = (0..model.n_bars())
            .filter(|&b| step.state.d[b] > prev.d[b])
            .collect();
        ranked.sort_by(|&a, &b| {
            let da = step.state.d[a] - prev.d[a];
            let db = step.state.d[b] - prev.d[b];
            db.total_cmp(&da).then(a.cmp(&b))
        });
        ranked.truncate(4 * MAX_START_BARS);
        self.hints = ranked;
        self.state = step.state;
        let index = self.history.len();
        debug!(
            "increment {index}: lambda {:.6e} max d {:.4} newton {}",
            self.lambda,
            self.state.max_damage(),
            step.metrics.newton_iters
        );
        self.history.increments.push(IncrementRecord {
            index,
            u: self.u.clone(),
            du: step.du,
            damage: self.state.clone(),
            load_factor: self.lambda,
            deflection: model.deflection(&self.u),
            metrics: step.metrics,
        });
    }
}

/// Full-order reference run of `n_increments` damage-controlled increments.
pub fn run_reference(
    model: &LatticeModel,
    control: &IncrementControl,
    n_increments: usize,
) -> Result<SolveHistory> {
    match run_reference_partial(model, control, n_increments) {
        (history, None) => Ok(history),
        (_, Some(e)) => Err(e),
    }
}

/// Like [`run_reference`], but keeps the increments converged before a
/// failure.
pub fn run_reference_partial(
    model: &LatticeModel,
    control: &IncrementControl,
    n_increments: usize,
) -> (SolveHistory, Option<Error>) {
    let mut driver = Driver::new(model);
    let mut space = FullSpace::new();
    for index in 0..n_increments {
        let step = controlled_step(
            model,
            &mut space,
            &driver.state,
            &driver.u,
            driver.lambda,
            control,
            &driver.hints,
            driver.predictor.as_ref(),
            driver.load_scale(),
        );
        match step {
            Ok(step) => driver.commit(model, step),
            Err(e) => return (driver.history, Some(e.at_increment(index))),
        }
    }
    (driver.history, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{build_frame_lattice, FrameSpec};
    use crate::lattice::{external_forces, MaterialLaw};
    use approx::assert_relative_eq;

    #[test]
    fn zero_load_needs_no_iteration() {
        let m = build_frame_lattice(&FrameSpec::single_bar()).unwrap();
        let (du, iters) = newton_solve_full(
            &m,
            &DamageState::undamaged(1),
            &DVector::zeros(1),
            0.0,
            1e-10,
            10,
        )
        .unwrap();
        assert_eq!(iters, 0);
        assert_eq!(du.norm(), 0.0);
    }

    #[test]
    fn single_bar_prescribed_load_ascending_root() {
        let m = build_frame_lattice(&FrameSpec::single_bar()).unwrap();
        let (du, _) = newton_solve_full(
            &m,
            &DamageState::undamaged(1),
            &DVector::zeros(1),
            0.1875,
            1e-12,
            30,
        )
        .unwrap();
        assert_relative_eq!(du[0], 0.25, epsilon = 1e-10);
    }

    #[test]
    fn linear_lattice_converges_in_one_iteration() {
        let mut spec = FrameSpec::tower();
        spec.nx = 3;
        spec.ny = 3;
        spec.nz = 3;
        spec.layout = crate::frame::Layout::Solid;
        spec.loaded_box = Some(crate::frame::BoxRegion {
            min: [0.0, 0.0, 3.0],
            max: [3.0, 3.0, 3.0],
        });
        spec.material.damage = false;
        let m = build_frame_lattice(&spec).unwrap();
        let state = DamageState::undamaged(m.n_bars());
        let (du, iters) =
            newton_solve_full(&m, &state, &DVector::zeros(m.n_free()), 2.0, 1e-10, 10).unwrap();
        assert_eq!(iters, 1);
        let k = tangent_stiffness(&m, &du, &state, TangentMode::Secant);
        assert!((k.mul_vec(&du) - external_forces(&m, 2.0)).norm() < 1e-10);
        assert_eq!(
            *m.material(),
            MaterialLaw {
                damage: false,
                ..MaterialLaw::new(2f64.sqrt(), 0.5)
            }
        );
    }

    #[test]
    fn single_bar_snap_through() {
        let m = build_frame_lattice(&FrameSpec::single_bar()).unwrap();
        let h = run_reference(&m, &IncrementControl::new(0.1), 10).unwrap();
        assert_eq!(h.len(), 10);
        for (i, r) in h.increments.iter().enumerate() {
            let eps = 0.1 * (i + 1) as f64;
            assert!((r.u[0] - eps).abs() < 1e-8, "increment {i}: u {}", r.u[0]);
            assert!((r.load_factor - (1.0 - eps) * eps).abs() < 1e-8);
        }
        assert!((h.peak_load() - 0.25).abs() < 1e-8);
    }

    #[test]
    fn fully_failed_structure_cannot_be_controlled() {
        let m = build_frame_lattice(&FrameSpec::single_bar()).unwrap();
        let broken = DamageState {
            d: vec![1.0],
            history: vec![1.0],
        };
        let err = arc_length_step(
            &m,
            &broken,
            &DVector::from_vec(vec![1.0]),
            0.0,
            &IncrementControl::new(0.1),
        );
        assert!(matches!(err, Err(Error::ControlFailure(_))));
        let e = run_reference(&m, &IncrementControl::new(0.1), 11).unwrap_err();
        assert_eq!(e.increment(), Some(10));
        assert!(matches!(e.root(), Error::ControlFailure(_)));
        assert_eq!(e.kind(), "control_failure");
    }

    #[test]
    fn empty_run() {
        let m = build_frame_lattice(&FrameSpec::single_bar()).unwrap();
        assert!(run_reference(&m, &IncrementControl::default(), 0)
            .unwrap()
            .is_empty());
    }
}
