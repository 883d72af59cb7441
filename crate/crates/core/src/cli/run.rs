use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use super::io::{self, *};
use super::scenario::{Mode, Scenario};
use crate::adaptivity::CorrectionRecord;
use crate::error::{Error, Result};
use crate::frame::build_frame_lattice;
use crate::lattice::LatticeModel;
use crate::localglobal::{run_reduced_partial, Splitting};
use crate::nonlinear::{run_reference_partial, SolveHistory};
use crate::pod::{compute_pod_basis, svd_truncation_error, ReducedBasis, SnapshotMatrix};

pub const SUMMARY_FILE: &str = "run.json";

/// Machine-readable summary written next to the tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub name: String,
    pub mode: Mode,
    /// Hash of the lattice geometry; runs are comparable when it matches.
    pub geometry: String,
    pub n_u: usize,
    pub n_bars: usize,
    pub increments: usize,
    pub peak_load: f64,
    pub initial_n_c: Option<usize>,
    pub final_n_c: Option<usize>,
    /// Truncation error of the initial basis on its snapshots.
    pub nu_svd: Option<f64>,
    pub corrections: usize,
    pub cg_iterations: usize,
    /// Increment at which the solver gave up, if it did.
    pub failed_at: Option<usize>,
}

/// Everything a run produces, before it is written out.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub scenario: Scenario,
    pub model: LatticeModel,
    pub history: SolveHistory,
    pub splittings: Vec<Splitting>,
    pub corrections: Vec<CorrectionRecord>,
    /// This run's own converged increments, in the scenario's snapshot kind.
    pub snapshots: Option<SnapshotMatrix>,
    pub initial_basis: Option<ReducedBasis>,
    pub nu_svd: Option<f64>,
    pub basis: Option<ReducedBasis>,
    /// Solver failure that ended the run early; the other fields hold the
    /// increments converged before it.
    pub failure: Option<ErrorRecord>,
}

/// Reads the scenario's snapshot file and truncates it.
pub fn load_basis(scenario: &Scenario, n_u: usize) -> Result<(ReducedBasis, f64)> {
    let pod = scenario.pod.as_ref().ok_or_else(|| {
        Error::Scenario(format!(
            "mode {} needs a \"pod\" section",
            scenario.mode.name()
        ))
    })?;
    let m = io::read_matrix(&pod.snapshot)?;
    if m.nrows() != n_u {
        return Err(Error::MismatchedGeometry(format!(
            "snapshot file {} has {} rows for {n_u} free DOFs",
            pod.snapshot.display(),
            m.nrows()
        )));
    }
    let s = SnapshotMatrix::from_columns(m);
    let basis = compute_pod_basis(&s, pod.truncation)?;
    let nu = svd_truncation_error(&basis, &s);
    info!(
        "basis of order {} from {} snapshots, nu_svd {nu:.3e}",
        basis.n_c(),
        s.n_snapshots()
    );
    Ok((basis, nu))
}

/// Runs a scenario. Invalid scenarios are errors; a solver failure ends
/// the run early and is reported in [`RunOutputs::failure`].
pub fn run(scenario: &Scenario) -> Result<RunOutputs> {
    scenario.validate()?;
    let model = build_frame_lattice(&scenario.frame)?;
    let n = scenario.increments;
    let mut out = RunOutputs {
        scenario: scenario.clone(),
        history: SolveHistory::default(),
        splittings: Vec::new(),
        corrections: Vec::new(),
        snapshots: None,
        initial_basis: None,
        nu_svd: None,
        basis: None,
        failure: None,
        model,
    };
    info!(
        "{}: mode {}, {} free DOFs, {} bars",
        scenario.name,
        scenario.mode.name(),
        out.model.n_free(),
        out.model.n_bars()
    );
    if scenario.mode == Mode::Full {
        let (history, failure) = run_reference_partial(&out.model, &scenario.control, n);
        out.history = history;
        out.failure = failure.as_ref().map(ErrorRecord::from);
    } else {
        let (basis, nu) = load_basis(scenario, out.model.n_free())?;
        out.initial_basis = Some(basis.clone());
        out.nu_svd = Some(nu);
        let config = scenario.reduced_config();
        let policy = (scenario.mode == Mode::Adaptive).then_some(&scenario.policy);
        let (run, failure) =
            run_reduced_partial(&out.model, &scenario.control, basis, &config, policy, n)?;
        out.failure = failure.as_ref().map(ErrorRecord::from);
        out.history = run.history;
        out.corrections = run.corrections;
        out.basis = Some(run.basis);
        if matches!(scenario.mode, Mode::Localglobal | Mode::Adaptive) {
            out.splittings = run.splittings;
        }
    }
    out.snapshots = out.history.snapshots(scenario.snapshots, &scenario.name);
    Ok(out)
}

impl RunOutputs {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            name: self.scenario.name.clone(),
            mode: self.scenario.mode,
            geometry: self.model.fingerprint(),
            n_u: self.model.n_free(),
            n_bars: self.model.n_bars(),
            increments: self.history.len(),
            peak_load: self.history.peak_load(),
            initial_n_c: self.initial_basis.as_ref().map(|b| b.n_c()),
            final_n_c: self.basis.as_ref().map(|b| b.n_c()),
            nu_svd: self.nu_svd,
            corrections: self.corrections.len(),
            cg_iterations: self
                .history
                .increments
                .iter()
                .flat_map(|r| &r.metrics.linear_solves)
                .map(|s| s.iterations)
                .sum(),
            failed_at: self.failure.as_ref().and_then(|f| f.increment),
        }
    }

    /// Writes every output file into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("scenario.json"), self.scenario.to_json() + "\n")?;
        let summary = serde_json::to_string_pretty(&self.summary())?;
        std::fs::write(dir.join(SUMMARY_FILE), summary + "\n")?;
        write_table(
            &dir.join("loaddefl.csv"),
            LOADDEFL_HEADER,
            &load_deflection_rows(&self.history),
        )?;
        write_table(
            &dir.join("metrics.csv"),
            METRICS_HEADER,
            &metrics_rows(&self.history, &self.corrections),
        )?;
        if self.scenario.mode.is_reduced() {
            write_table(&dir.join("cg.csv"), CG_HEADER, &cg_rows(&self.history))?;
            write_table(
                &dir.join("corrections.csv"),
                CORRECTIONS_HEADER,
                &self.corrections,
            )?;
        }
        if !self.splittings.is_empty() {
            write_table(
                &dir.join("splitting.csv"),
                SPLITTING_HEADER,
                &splitting_rows(&self.splittings),
            )?;
        }
        if let Some(s) = &self.snapshots {
            write_matrix(&dir.join("snapshots.lrmat"), s.matrix())?;
            write_matrix_csv(&dir.join("snapshots.csv"), s.matrix(), s.labels())?;
        }
        for (stem, basis) in [
            ("basis_initial", &self.initial_basis),
            ("basis", &self.basis),
        ] {
            if let Some(b) = basis {
                write_matrix(&dir.join(format!("{stem}.lrmat")), b.matrix())?;
                let header: Vec<String> = (0..b.n_c()).map(|j| format!("c{j}")).collect();
                write_matrix_csv(&dir.join(format!("{stem}.csv")), b.matrix(), &header)?;
            }
        }
        let error_path = dir.join("error.json");
        match &self.failure {
            Some(f) => std::fs::write(&error_path, serde_json::to_string_pretty(f)? + "\n")?,
            None if error_path.exists() => std::fs::remove_file(&error_path)?,
            None => {}
        }
        if let Some(last) = self.history.increments.last() {
            let rows: Vec<(usize, f64)> = last.damage.d.iter().copied().enumerate().collect();
            write_table(&dir.join("damage.csv"), &["bar", "d"], &rows)?;
        }
        Ok(())
    }
}

/// Failure record written as `error.json` when a run aborts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub increment: Option<usize>,
    pub message: String,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        Self {
            kind: e.kind().to_string(),
            increment: e.increment(),
            message: e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::scenario::PodSpec;
    use crate::frame::FrameSpec;
    use crate::nonlinear::IncrementControl;
    use crate::pod::Truncation;

    fn single_bar() -> Scenario {
        Scenario::new(
            "bar",
            FrameSpec::single_bar(),
            IncrementControl::new(0.1),
            10,
            Mode::Full,
        )
    }

    #[test]
    fn single_bar_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&single_bar()).unwrap();
        out.write(dir.path()).unwrap();
        let rows: Vec<LoadDeflectionRow> = read_table(&dir.path().join("loaddefl.csv")).unwrap();
        assert_eq!(rows.len(), 10);
        for r in &rows {
            let eps = r.deflection;
            assert!((r.load_factor - (1.0 - eps) * eps).abs() < 1e-8);
        }
        let summary: RunSummary =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap())
                .unwrap();
        assert!((summary.peak_load - 0.25).abs() < 1e-8);
        assert_eq!(
            io::read_matrix(&dir.path().join("snapshots.lrmat"))
                .unwrap()
                .shape(),
            (1, 10)
        );
        assert!(!dir.path().join("basis.lrmat").exists());
    }

    #[test]
    fn pod_on_own_snapshots_reproduces_the_bar() {
        let dir = tempfile::tempdir().unwrap();
        run(&single_bar()).unwrap().write(dir.path()).unwrap();
        let mut s = single_bar();
        s.mode = Mode::Pod;
        s.pod = Some(PodSpec {
            snapshot: dir.path().join("snapshots.lrmat"),
            truncation: Truncation::Full,
        });
        let out = run(&s).unwrap();
        assert_eq!(out.summary().initial_n_c, Some(1));
        for (i, r) in out.history.increments.iter().enumerate() {
            let eps = 0.1 * (i + 1) as f64;
            assert!((r.load_factor - (1.0 - eps) * eps).abs() < 1e-8);
        }
    }

    #[test]
    fn errors_carry_kind_and_increment() {
        let mut s = single_bar();
        s.increments = 11;
        let out = run(&s).unwrap();
        assert_eq!(out.history.len(), 10);
        let rec = out.failure.clone().unwrap();
        assert_eq!(rec.kind, "control_failure");
        assert_eq!(rec.increment, Some(10));
        let dir = tempfile::tempdir().unwrap();
        out.write(dir.path()).unwrap();
        let back: ErrorRecord =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("error.json")).unwrap())
                .unwrap();
        assert_eq!(back, rec);
        assert_eq!(out.summary().failed_at, Some(10));
    }
}
