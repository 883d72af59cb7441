//! Library equivalent of `latred --scenario ...` followed by
//! `latred compare`: a reference and a local/global run of the small tower
//! written to a directory and compared.

use std::path::PathBuf;

use latred::cli::{self, compare_dirs, Mode, PodSpec, Scenario};
use latred::pod::Truncation;

fn main() -> latred::Result<()> {
    cli::init_logging();
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "out/scenario_compare".into()),
    );
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/small_tower.json");
    let reference = Scenario::load(path.as_ref())?;
    cli::run(&reference)?.write(&out.join("reference"))?;

    let mut lg = reference.clone();
    lg.name = "small_tower_localglobal".into();
    lg.mode = Mode::Localglobal;
    lg.pod = Some(PodSpec {
        snapshot: out.join("reference/snapshots.lrmat"),
        truncation: Truncation::Order(3),
    });
    let run = cli::run(&lg)?;
    run.write(&out.join("localglobal"))?;
    let s = run.summary();
    println!(
        "local/global: n_c {} -> {}, {} CG iterations",
        s.initial_n_c.unwrap_or(0),
        s.final_n_c.unwrap_or(0),
        s.cg_iterations
    );
    println!(
        "{}",
        compare_dirs(&out.join("reference"), &out.join("localglobal"))?
    );
    Ok(())
}
