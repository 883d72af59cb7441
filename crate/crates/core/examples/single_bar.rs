//! Snap-through of one damageable bar under damage control, against the
//! closed-form response `lambda = (1 - eps) eps`.

use latred::nonlinear::{run_reference, IncrementControl};
use latred::{build_frame_lattice, FrameSpec};

fn main() -> latred::Result<()> {
    latred::cli::init_logging();
    let delta: f64 = std::env::args()
        .nth(1)
        .map_or(0.05, |s| s.parse().expect("delta_d_max"));
    let model = build_frame_lattice(&FrameSpec::single_bar())?;
    let n = (1.0 / delta).round() as usize;
    let history = run_reference(&model, &IncrementControl::new(delta), n)?;
    println!(
        "{:>4} {:>8} {:>10} {:>10}",
        "inc", "strain", "load", "exact"
    );
    for r in &history.increments {
        let eps = r.deflection;
        println!(
            "{:4} {eps:8.4} {:10.6} {:10.6}",
            r.index,
            r.load_factor,
            (1.0 - eps) * eps
        );
    }
    println!("peak {:.6}", history.peak_load());
    Ok(())
}
