//! Full-order damage-controlled run on the bundled tower, printing the
//! load/deflection curve.

use latred::nonlinear::{run_reference, IncrementControl};
use latred::{build_frame_lattice, FrameSpec};

fn main() -> latred::Result<()> {
    latred::cli::init_logging();
    let delta: f64 = std::env::args()
        .nth(1)
        .map_or(0.1, |s| s.parse().expect("delta_d_max"));
    let n: usize = std::env::args()
        .nth(2)
        .map_or(30, |s| s.parse().expect("increments"));
    let model = build_frame_lattice(&FrameSpec::tower())?;
    println!(
        "nodes {} bars {} free dofs {}",
        model.n_nodes(),
        model.n_bars(),
        model.n_free()
    );
    let t = std::time::Instant::now();
    let history = run_reference(&model, &IncrementControl::new(delta), n)?;
    for r in &history.increments {
        println!(
            "{:3} deflection {:10.5} load {:10.6} newton {:2} switches {} max d {:.3}",
            r.index,
            r.deflection,
            r.load_factor,
            r.metrics.newton_iters,
            r.metrics.control_switches,
            r.damage.max_damage()
        );
    }
    println!("peak {:.6} in {:.1?}", history.peak_load(), t.elapsed());
    Ok(())
}
