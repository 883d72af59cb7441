//! Augmented against plain CG on every condensed system of a local/global
//! run of the bundled tower.

use latred::localglobal::{run_reduced, ReducedConfig, SplitParams};
use latred::nonlinear::{run_reference, IncrementControl, SnapshotKind};
use latred::pod::{compute_pod_basis, Truncation};
use latred::{build_frame_lattice, FrameSpec};

fn main() -> latred::Result<()> {
    latred::cli::init_logging();
    let n: usize = std::env::args()
        .nth(1)
        .map_or(30, |s| s.parse().expect("increments"));
    let control = IncrementControl::new(0.1);
    let model = build_frame_lattice(&FrameSpec::tower())?;
    let reference = run_reference(&model, &control, n)?;
    let s = reference
        .snapshots(SnapshotKind::Increment, "tower")
        .expect("snapshots");
    let basis = compute_pod_basis(&s, Truncation::Order(3))?;
    let config = ReducedConfig {
        measure_unaugmented: true,
        ..ReducedConfig::localglobal(SplitParams::default())
    };
    let run = run_reduced(&model, &control, basis, &config, None, n)?;
    let solves: Vec<_> = run
        .history
        .increments
        .iter()
        .flat_map(|r| &r.metrics.linear_solves)
        .collect();
    let direct = solves.iter().filter(|s| s.direct).count();
    let pairs: Vec<(usize, usize)> = solves
        .iter()
        .filter(|s| !s.direct)
        .filter_map(|s| s.unaugmented_iterations.map(|u| (s.iterations, u)))
        .collect();
    let not_worse = pairs.iter().filter(|(a, u)| a <= u).count();
    let mut reductions: Vec<f64> = pairs
        .iter()
        .filter(|(_, u)| *u > 0)
        .map(|&(a, u)| 1.0 - a as f64 / u as f64)
        .collect();
    reductions.sort_by(f64::total_cmp);
    let median = reductions.get(reductions.len() / 2).copied().unwrap_or(0.0);
    println!(
        "{} condensed systems, {direct} solved directly, {} compared",
        solves.len(),
        pairs.len()
    );
    println!(
        "augmented no worse on {:.1}%, median reduction {:.1}%",
        100.0 * not_worse as f64 / pairs.len().max(1) as f64,
        100.0 * median
    );
    let (a, u): (usize, usize) = pairs.iter().fold((0, 0), |(x, y), p| (x + p.0, y + p.1));
    println!("total iterations {a} augmented, {u} plain");
    Ok(())
}
