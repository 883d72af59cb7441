use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_table, write_table, LoadDeflectionRow, MetricsRow};
use super::run::{RunSummary, SUMMARY_FILE};
use crate::error::{Error, Result};

/// A finished run read back from its output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub summary: RunSummary,
    pub curve: Vec<LoadDeflectionRow>,
    pub metrics: Vec<MetricsRow>,
}

impl RunRecord {
    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(SUMMARY_FILE)).map_err(|e| {
            Error::Scenario(format!("{} is not a run directory: {e}", dir.display()))
        })?;
        Ok(Self {
            summary: serde_json::from_str(&text)?,
            curve: read_table(&dir.join("loaddefl.csv"))?,
            metrics: read_table(&dir.join("metrics.csv"))?,
        })
    }

    pub fn peak_load(&self) -> f64 {
        self.curve.iter().map(|r| r.load_factor).fold(0.0, f64::max)
    }

    pub fn corrections(&self) -> usize {
        self.metrics.iter().map(|m| m.corrections).sum()
    }

    pub fn cg_iterations(&self) -> usize {
        self.metrics.iter().map(|m| m.cg_iterations).sum()
    }

    pub fn newton_iterations(&self) -> usize {
        self.metrics.iter().map(|m| m.newton_iters).sum()
    }
}

/// Differences of run `b` with respect to run `a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub name_a: String,
    pub name_b: String,
    pub peak_a: f64,
    pub peak_b: f64,
    /// `100 (peak_b - peak_a) / peak_a`; positive when `b` overestimates.
    pub peak_error_percent: f64,
    /// Euclidean distance between the two curves, paired by increment, in
    /// the (deflection, load factor) plane.
    pub curve_l2: f64,
    /// Largest load-factor difference relative to `peak_a` over paired
    /// increments.
    pub max_load_rel_diff: f64,
    pub paired_increments: usize,
    pub corrections_a: usize,
    pub corrections_b: usize,
    pub cg_iterations_a: usize,
    pub cg_iterations_b: usize,
    pub newton_iterations_a: usize,
    pub newton_iterations_b: usize,
}

pub fn compare(a: &RunRecord, b: &RunRecord) -> Result<CompareReport> {
    if a.summary.geometry != b.summary.geometry {
        return Err(Error::MismatchedGeometry(format!(
            "{} ({} DOFs) and {} ({} DOFs) use different lattices",
            a.summary.name, a.summary.n_u, b.summary.name, b.summary.n_u
        )));
    }
    let paired: Vec<_> = a.curve.iter().zip(&b.curve).collect();
    let curve_l2 = paired
        .iter()
        .map(|(p, q)| {
            (p.deflection - q.deflection).powi(2) + (p.load_factor - q.load_factor).powi(2)
        })
        .sum::<f64>()
        .sqrt();
    let (peak_a, peak_b) = (a.peak_load(), b.peak_load());
    let max_load_rel_diff = paired
        .iter()
        .map(|(p, q)| (p.load_factor - q.load_factor).abs())
        .fold(0.0, f64::max)
        / peak_a;
    Ok(CompareReport {
        name_a: a.summary.name.clone(),
        name_b: b.summary.name.clone(),
        peak_a,
        peak_b,
        peak_error_percent: 100.0 * (peak_b - peak_a) / peak_a,
        curve_l2,
        max_load_rel_diff,
        paired_increments: paired.len(),
        corrections_a: a.corrections(),
        corrections_b: b.corrections(),
        cg_iterations_a: a.cg_iterations(),
        cg_iterations_b: b.cg_iterations(),
        newton_iterations_a: a.newton_iterations(),
        newton_iterations_b: b.newton_iterations(),
    })
}

pub fn compare_dirs(a: &Path, b: &Path) -> Result<CompareReport> {
    compare(&RunRecord::load(a)?, &RunRecord::load(b)?)
}

impl CompareReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_table(path, COMPARE_HEADER, std::slice::from_ref(self))
    }
}

pub const COMPARE_HEADER: &[&str] = &[
    "name_a",
    "name_b",
    "peak_a",
    "peak_b",
    "peak_error_percent",
    "curve_l2",
    "max_load_rel_diff",
    "paired_increments",
    "corrections_a",
    "corrections_b",
    "cg_iterations_a",
    "cg_iterations_b",
    "newton_iterations_a",
    "newton_iterations_b",
];

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} vs {}", self.name_b, self.name_a)?;
        writeln!(
            f,
            "  peak load      {:.6} vs {:.6} ({:+.3}%)",
            self.peak_b, self.peak_a, self.peak_error_percent
        )?;
        writeln!(
            f,
            "  curve distance {:.3e} over {} increments (max load difference {:.3e} of peak)",
            self.curve_l2, self.paired_increments, self.max_load_rel_diff
        )?;
        writeln!(
            f,
            "  corrections    {} vs {}",
            self.corrections_b, self.corrections_a
        )?;
        writeln!(
            f,
            "  CG iterations  {} vs {}",
            self.cg_iterations_b, self.cg_iterations_a
        )?;
        write!(
            f,
            "  Newton iters   {} vs {}",
            self.newton_iterations_b, self.newton_iterations_a
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::run::run;
    use crate::cli::scenario::{Mode, Scenario};
    use crate::frame::FrameSpec;
    use crate::nonlinear::IncrementControl;

    fn bar_run(dir: &Path, delta: f64) -> RunRecord {
        let s = Scenario::new(
            "bar",
            FrameSpec::single_bar(),
            IncrementControl::new(delta),
            4,
            Mode::Full,
        );
        run(&s).unwrap().write(dir).unwrap();
        RunRecord::load(dir).unwrap()
    }

    #[test]
    fn identical_runs() {
        let dir = tempfile::tempdir().unwrap();
        let a = bar_run(&dir.path().join("a"), 0.1);
        let b = bar_run(&dir.path().join("b"), 0.1);
        let r = compare(&a, &b).unwrap();
        assert_eq!(r.peak_error_percent, 0.0);
        assert_eq!(r.curve_l2, 0.0);
        assert_eq!(r.paired_increments, 4);
        let path = dir.path().join("compare.csv");
        r.write_csv(&path).unwrap();
        assert_eq!(read_table::<CompareReport>(&path).unwrap(), vec![r]);
    }

    #[test]
    fn different_curves() {
        let dir = tempfile::tempdir().unwrap();
        let a = bar_run(&dir.path().join("a"), 0.1);
        let b = bar_run(&dir.path().join("b"), 0.05);
        let r = compare(&a, &b).unwrap();
        let load = |e: f64| (1.0 - e) * e;
        assert!((r.peak_a - load(0.4)).abs() < 1e-8);
        assert!((r.peak_b - load(0.2)).abs() < 1e-8);
        assert!((r.peak_error_percent - 100.0 * (load(0.2) / load(0.4) - 1.0)).abs() < 1e-6);
        let expected: f64 = (1..=4)
            .map(|i| {
                let (ea, eb) = (0.1 * i as f64, 0.05 * i as f64);
                (ea - eb).powi(2) + (load(ea) - load(eb)).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        assert!((r.curve_l2 - expected).abs() < 1e-8);
    }

    #[test]
    fn mismatched_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let a = bar_run(&dir.path().join("a"), 0.1);
        let mut b = a.clone();
        b.summary.geometry = "other".into();
        assert!(matches!(compare(&a, &b), Err(Error::MismatchedGeometry(_))));
        assert!(compare_dirs(dir.path(), &dir.path().join("a")).is_err());
    }
}
