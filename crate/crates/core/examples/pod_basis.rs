//! Snapshot POD of the small tower: spectrum, truncation error per order and
//! how well each basis represents the snapshots.

use latred::build_frame_lattice;
use latred::cli::Scenario;
use latred::nonlinear::{run_reference, SnapshotKind};
use latred::pod::{compute_pod_basis, project, svd_truncation_error, Truncation};

fn main() -> latred::Result<()> {
    latred::cli::init_logging();
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/small_tower.json");
    let scenario = Scenario::load(path.as_ref())?;
    let model = build_frame_lattice(&scenario.frame)?;
    let history = run_reference(&model, &scenario.control, scenario.increments)?;
    let s = history
        .snapshots(SnapshotKind::Increment, "small_tower")
        .expect("snapshots");
    let full = compute_pod_basis(&s, Truncation::Full)?;
    let lmax = full.lambdas()[0];
    println!(
        "{} snapshots of {} DOFs, rank {}",
        s.n_snapshots(),
        s.n_rows(),
        full.n_c()
    );
    println!(
        "{:>3} {:>12} {:>12} {:>12}",
        "n_c", "lambda/lmax", "nu_svd", "worst proj"
    );
    for n_c in 1..=full.n_c() {
        let basis = compute_pod_basis(&s, Truncation::Order(n_c))?;
        let worst = s
            .matrix()
            .column_iter()
            .map(|c| {
                let v = c.into_owned();
                project(&basis, &v).1 / v.norm()
            })
            .fold(0.0, f64::max);
        println!(
            "{n_c:3} {:12.3e} {:12.3e} {worst:12.3e}",
            full.lambdas()[n_c - 1] / lmax,
            svd_truncation_error(&basis, &s)
        );
    }
    Ok(())
}
