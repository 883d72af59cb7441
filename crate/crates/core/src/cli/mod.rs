//! Scenario files, run orchestration over the four solver modes, output
//! files and run comparison.

pub mod compare;
pub mod io;
pub mod run;
pub mod scenario;

pub use compare::{compare, compare_dirs, CompareReport, RunRecord};
pub use run::{run, ErrorRecord, RunOutputs, RunSummary};
pub use scenario::{Mode, Overrides, PodSpec, Scenario};

/// Logger reading its filter from `LATRED_LOG` (default `warn`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("LATRED_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}
