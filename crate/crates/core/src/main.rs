use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latred::cli::{self, ErrorRecord, Mode, Overrides, Scenario};
use latred::{Error, Result};

/// Local/global reduced-order simulation of damageable lattices.
#[derive(Parser, Debug)]
#[command(version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compare two run directories; run `b` is measured against run `a`.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the report as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Snapshot matrix file the reduced basis is computed from.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    /// Basis order.
    #[arg(long = "nc", conflicts_with = "eps_svd")]
    n_c: Option<usize>,
    /// Keep modes with lambda_i / lambda_max above this.
    #[arg(long)]
    eps_svd: Option<f64>,
    #[arg(long)]
    rho_s: Option<f64>,
    #[arg(long)]
    kdam: Option<f64>,
    #[arg(long)]
    klocglo: Option<f64>,
    #[arg(long)]
    eta_global: Option<f64>,
    #[arg(long)]
    eta_reduced: Option<f64>,
    #[arg(long)]
    increments: Option<usize>,
    #[arg(long)]
    newton_tol: Option<f64>,
    #[arg(long)]
    cg_tol: Option<f64>,
    /// Worker threads for assembly (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("unknown mode {s:?} (full, pod, localglobal, adaptive)"))
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode,
            snapshot: self.snapshot.clone(),
            n_c: self.n_c,
            eps_svd: self.eps_svd,
            rho_s: self.rho_s,
            k_dam: self.kdam,
            k_locglo: self.klocglo,
            eta_global: self.eta_global,
            eta_reduced: self.eta_reduced,
            increments: self.increments,
            newton_tol: self.newton_tol,
            cg_tol: self.cg_tol,
        }
    }
}

/// Returns the solver failure of a run that ended early.
fn run(args: &RunArgs) -> Result<Option<ErrorRecord>> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Scenario(format!("thread pool: {e}")))?;
    }
    let path = args
        .scenario
        .as_deref()
        .ok_or_else(|| Error::Scenario("--scenario is required".into()))?;
    let mut scenario = Scenario::load(path)?;
    scenario.apply(&args.overrides())?;
    let outputs = cli::run(&scenario)?;
    outputs.write(&args.out)?;
    let s = outputs.summary();
    println!(
        "{}: {} increments, peak load {:.6}, written to {}",
        s.name,
        s.increments,
        s.peak_load,
        args.out.display()
    );
    Ok(outputs.failure)
}

fn write_error_record(dir: &Path, e: &ErrorRecord) {
    let record = serde_json::to_string_pretty(e).expect("record serializes");
    eprintln!("{record}");
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = std::fs::write(dir.join("error.json"), record + "\n");
    }
}

fn main() -> ExitCode {
    cli::init_logging();
    let args = Cli::parse();
    match &args.command {
        Some(Command::Compare { a, b, out }) => match cli::compare_dirs(a, b) {
            Ok(report) => {
                println!("{report}");
                if let Some(path) = out {
                    if let Err(e) = report.write_csv(path) {
                        eprintln!("{e}");
                        return ExitCode::FAILURE;
                    }
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!(
                    "{}",
                    serde_json::to_string(&ErrorRecord::from(&e)).expect("record serializes")
                );
                ExitCode::FAILURE
            }
        },
        None => match run(&args.run) {
            Ok(None) => ExitCode::SUCCESS,
            Ok(Some(failure)) => {
                eprintln!(
                    "{}",
                    serde_json::to_string_pretty(&failure).expect("record serializes")
                );
                ExitCode::FAILURE
            }
            Err(e) => {
                write_error_record(&args.run.out, &ErrorRecord::from(&e));
                ExitCode::FAILURE
            }
        },
    }
}
