//! Condensed two-level solve of one tangent system of the tower: the basis
//! part is eliminated, the resolved DOFs go through augmented CG, and the
//! iteration counts with and without the coarse space are compared.

use nalgebra::DVector;

use latred::krylov::{
    augmented_pcg, back_substitute, condense, default_preconditioner, Augmentation, CgOptions,
};
use latred::lattice::{tangent_stiffness, update_damage, DamageState, TangentMode};
use latred::localglobal::{
    build_coupling_operator, reduced_tangent, select_fully_resolved, SplitParams,
};
use latred::nonlinear::{run_reference, IncrementControl, SnapshotKind};
use latred::pod::{compute_pod_basis, Truncation};
use latred::{build_frame_lattice, FrameSpec};

fn main() -> latred::Result<()> {
    latred::cli::init_logging();
    let model = build_frame_lattice(&FrameSpec::tower())?;
    let history = run_reference(&model, &IncrementControl::new(0.1), 6)?;
    let basis = compute_pod_basis(
        &history
            .snapshots(SnapshotKind::Increment, "tower")
            .expect("snapshots"),
        Truncation::Order(3),
    )?;
    let (prev, last) = (&history.increments[4], &history.increments[5]);
    let split = select_fully_resolved(
        &model,
        &prev.damage.d,
        &last.damage.d,
        &SplitParams::default(),
        5,
    )?;
    println!(
        "n_u {} n_c {} n_f {}",
        model.n_free(),
        basis.n_c(),
        split.n_f()
    );

    let state = update_damage(&DamageState::undamaged(model.n_bars()), &model, &last.u);
    let k = tangent_stiffness(&model, &last.u, &state, TangentMode::Secant);
    let a = build_coupling_operator(basis.matrix(), &split)?;
    let blocks = reduced_tangent(&a, &k)?;
    let (b_r, b_f) = a.transpose_apply(model.unit_load());
    let sys = condense(&blocks, &b_r, &b_f)?;
    let precond = default_preconditioner(&sys);
    let opts = CgOptions {
        tol: 1e-10,
        ..CgOptions::default()
    };
    for (label, aug) in [
        ("plain", Augmentation::none(split.n_f())),
        (
            "augmented",
            Augmentation::new(&sys, &split.rows_f(basis.matrix()))?,
        ),
    ] {
        let (du_f, report) = augmented_pcg(&sys, &aug, &precond, &opts)?;
        let d_alpha = back_substitute(&sys, &b_r, &du_f);
        let x = a.apply(&d_alpha, &du_f)?;
        let residual: DVector<f64> = a.transpose_apply(&(k.mul_vec(&x) - model.unit_load())).1;
        println!(
            "{label:>9}: {} iterations, initial residual {:.3e}, |R_f| after {:.3e}",
            report.iterations,
            report.residual_history[0],
            residual.norm()
        );
    }
    Ok(())
}
