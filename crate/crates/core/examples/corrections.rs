//! Global corrections on the bundled tower with a basis from a nearby load
//! case: local/global splitting against corrections alone.

use std::time::Instant;

use latred::adaptivity::CorrectionPolicy;
use latred::frame::BoxRegion;
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
    let mut nearby_spec = FrameSpec::tower();
    nearby_spec.loaded_box = Some(BoxRegion {
        min: [9.0, 9.0, 11.0],
        max: [11.0, 11.0, 11.0],
    });
    let nearby = run_reference(&build_frame_lattice(&nearby_spec)?, &control, n)?;
    let s = nearby
        .snapshots(SnapshotKind::Increment, "nearby")
        .expect("snapshots");
    let basis = compute_pod_basis(&s, Truncation::Order(3))?;
    let policy = CorrectionPolicy::default();

    let global_only = ReducedConfig {
        enrich: true,
        ..ReducedConfig::pod()
    };
    for (label, config) in [
        (
            "local/global",
            ReducedConfig::localglobal(SplitParams::default()),
        ),
        ("global only", global_only),
    ] {
        let t = Instant::now();
        let run = run_reduced(&model, &control, basis.clone(), &config, Some(&policy), n)?;
        let per: Vec<usize> = (0..run.history.len())
            .map(|i| run.corrections.iter().filter(|c| c.increment == i).count())
            .collect();
        println!(
            "{label:>12}: {} corrections in {:.1?}, peak {:.6}, n_c {}",
            run.corrections.len(),
            t.elapsed(),
            run.history.peak_load(),
            run.basis.n_c()
        );
        println!("    per increment {per:?}");
    }
    Ok(())
}
