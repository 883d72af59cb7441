//! Reference, POD and local/global runs on the bundled tower with a basis
//! of order 3 taken either from the same problem or from a nearby load case.

use std::time::Instant;

use latred::frame::BoxRegion;
use latred::localglobal::{run_localglobal, run_pod, ReducedRun, SplitParams};
use latred::nonlinear::{run_reference, IncrementControl, SnapshotKind, SolveHistory};
use latred::pod::{compute_pod_basis, Truncation};
use latred::{build_frame_lattice, FrameSpec};

fn summary(name: &str, h: &SolveHistory, reference: f64) {
    let peak = h.peak_load();
    println!(
        "{name:>14}: peak {peak:.6} error {:+.3}%",
        100.0 * (peak - reference) / reference
    );
}

fn cg_stats(run: &ReducedRun) -> (usize, usize) {
    let solves: Vec<_> = run
        .history
        .increments
        .iter()
        .flat_map(|r| &r.metrics.linear_solves)
        .collect();
    (solves.len(), solves.iter().map(|s| s.iterations).sum())
}

fn main() -> latred::Result<()> {
    latred::cli::init_logging();
    let n: usize = std::env::args()
        .nth(1)
        .map_or(30, |s| s.parse().expect("increments"));
    let n_c: usize = std::env::args()
        .nth(2)
        .map_or(3, |s| s.parse().expect("basis order"));
    let control = IncrementControl::new(0.1);
    let model = build_frame_lattice(&FrameSpec::tower())?;
    let mut nearby_spec = FrameSpec::tower();
    nearby_spec.loaded_box = Some(BoxRegion {
        min: [9.0, 9.0, 11.0],
        max: [11.0, 11.0, 11.0],
    });
    let nearby = build_frame_lattice(&nearby_spec)?;

    let t = Instant::now();
    let reference = run_reference(&model, &control, n)?;
    let peak = reference.peak_load();
    println!("reference in {:.1?}", t.elapsed());
    summary("reference", &reference, peak);
    let t = Instant::now();
    let other = run_reference(&nearby, &control, n)?;
    println!(
        "nearby reference in {:.1?}, peak {:.6}",
        t.elapsed(),
        other.peak_load()
    );

    for (label, source) in [("same", &reference), ("nearby", &other)] {
        let s = source
            .snapshots(SnapshotKind::Increment, label)
            .expect("snapshots");
        let basis = compute_pod_basis(&s, Truncation::Order(n_c))?;
        let t = Instant::now();
        match run_pod(&model, &control, basis.clone(), n) {
            Ok(run) => {
                summary(&format!("pod/{label}"), &run.history, peak);
                println!("    {:.1?}, {} increments", t.elapsed(), run.history.len());
            }
            Err(e) => println!("pod/{label} failed: {e}"),
        }
        let t = Instant::now();
        match run_localglobal(&model, &control, basis, SplitParams::default(), n) {
            Ok(run) => {
                summary(&format!("lg/{label}"), &run.history, peak);
                let (solves, iters) = cg_stats(&run);
                let nf: Vec<usize> = run.splittings.iter().map(|s| s.n_f()).collect();
                println!(
                    "    {:.1?}, n_c {}, {solves} condensed solves, {iters} CG iterations, n_f {nf:?}",
                    t.elapsed(),
                    run.basis.n_c()
                );
            }
            Err(e) => println!("lg/{label} failed: {e}"),
        }
    }
    Ok(())
}
