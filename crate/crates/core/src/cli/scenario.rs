use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adaptivity::CorrectionPolicy;
use crate::error::{Error, Result};
use crate::frame::FrameSpec;
use crate::krylov::CgOptions;
use crate::localglobal::{ReducedConfig, SplitParams, SplittingPolicy};
use crate::nonlinear::{IncrementControl, SnapshotKind};
use crate::pod::Truncation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Pod,
    Localglobal,
    Adaptive,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Pod => "pod",
            Mode::Localglobal => "localglobal",
            Mode::Adaptive => "adaptive",
        }
    }

    pub fn is_reduced(self) -> bool {
        self != Mode::Full
    }
}

/// Where the reduced basis comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PodSpec {
    /// Snapshot matrix file; relative paths are taken from the scenario
    /// file's directory.
    pub snapshot: PathBuf,
    pub truncation: Truncation,
}

fn default_splitting() -> SplittingPolicy {
    SplittingPolicy::Greedy(SplitParams::default())
}

/// One simulation: geometry, increment control, solver mode and the
/// parameters of the reduced solvers. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub frame: FrameSpec,
    pub control: IncrementControl,
    pub increments: usize,
    pub mode: Mode,
    /// Required by every mode but `full`.
    #[serde(default)]
    pub pod: Option<PodSpec>,
    /// Resolved-set policy of `localglobal` and `adaptive` runs.
    #[serde(default = "default_splitting")]
    pub splitting: SplittingPolicy,
    #[serde(default)]
    pub policy: CorrectionPolicy,
    /// Condensed solver options; the reduced-run defaults when absent.
    #[serde(default)]
    pub cg: Option<CgOptions>,
    /// Content of the snapshot matrix written by the run.
    #[serde(default)]
    pub snapshots: SnapshotKind,
    /// Also count CG iterations without augmentation on every condensed
    /// system (doubles the linear solver cost).
    #[serde(default)]
    pub measure_unaugmented: bool,
}

/// Command-line adjustments applied on top of a scenario file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub snapshot: Option<PathBuf>,
    pub n_c: Option<usize>,
    pub eps_svd: Option<f64>,
    pub rho_s: Option<f64>,
    pub k_dam: Option<f64>,
    pub k_locglo: Option<f64>,
    pub eta_global: Option<f64>,
    pub eta_reduced: Option<f64>,
    pub increments: Option<usize>,
    pub newton_tol: Option<f64>,
    pub cg_tol: Option<f64>,
}

impl Scenario {
    /// Scenario with default reduced-solver settings and no basis source.
    pub fn new(
        name: &str,
        frame: FrameSpec,
        control: IncrementControl,
        increments: usize,
        mode: Mode,
    ) -> Self {
        Self {
            name: name.into(),
            frame,
            control,
            increments,
            mode,
            pod: None,
            splitting: default_splitting(),
            policy: CorrectionPolicy::default(),
            cg: None,
            snapshots: SnapshotKind::default(),
            measure_unaugmented: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Scenario(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    /// Reads and validates a scenario file, resolving the snapshot path
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Scenario(format!("cannot read {}: {e}", path.display())))?;
        let mut s = Self::from_json(&text)
            .map_err(|e| Error::Scenario(format!("{}: {e}", path.display())))?;
        if let Some(pod) = &mut s.pod {
            if pod.snapshot.is_relative() {
                let base = path.parent().unwrap_or(Path::new(""));
                pod.snapshot = base.join(&pod.snapshot);
            }
        }
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(n) = o.increments {
            self.increments = n;
        }
        if let Some(t) = o.newton_tol {
            self.control.newton_tol = t;
        }
        if o.n_c.is_some() && o.eps_svd.is_some() {
            return Err(Error::Scenario("--nc and --eps-svd are exclusive".into()));
        }
        let truncation = o
            .n_c
            .map(Truncation::Order)
            .or(o.eps_svd.map(Truncation::Ratio));
        match (&mut self.pod, o.snapshot.clone()) {
            (Some(pod), snapshot) => {
                if let Some(p) = snapshot {
                    pod.snapshot = p;
                }
                if let Some(t) = truncation {
                    pod.truncation = t;
                }
            }
            (None, Some(snapshot)) => {
                self.pod = Some(PodSpec {
                    snapshot,
                    truncation: truncation.unwrap_or(Truncation::Full),
                })
            }
            (None, None) if truncation.is_some() => {
                return Err(Error::Scenario("a truncation needs a snapshot file".into()));
            }
            (None, None) => {}
        }
        if o.rho_s.is_some() || o.k_dam.is_some() || o.k_locglo.is_some() {
            let SplittingPolicy::Greedy(p) = &mut self.splitting else {
                return Err(Error::Scenario(
                    "splitting parameters need the greedy splitting policy".into(),
                ));
            };
            p.rho_s = o.rho_s.unwrap_or(p.rho_s);
            p.k_dam = o.k_dam.unwrap_or(p.k_dam);
            p.k_locglo = o.k_locglo.unwrap_or(p.k_locglo);
        }
        if let Some(e) = o.eta_global {
            self.policy.eta_global = e;
        }
        if let Some(e) = o.eta_reduced {
            self.policy.eta_reduced = e;
        }
        if let Some(t) = o.cg_tol {
            let mut cg = self.cg_options();
            cg.tol = t;
            self.cg = Some(cg);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.control.validate()?;
        if self.mode.is_reduced() {
            let Some(pod) = &self.pod else {
                return Err(Error::Scenario(format!(
                    "mode {} needs a \"pod\" section",
                    self.mode.name()
                )));
            };
            if !pod.snapshot.is_file() {
                return Err(Error::Scenario(format!(
                    "snapshot file {} not found",
                    pod.snapshot.display()
                )));
            }
            match pod.truncation {
                Truncation::Order(0) => {
                    return Err(Error::Scenario("truncation order must be positive".into()))
                }
                Truncation::Ratio(e) if !(e > 0.0 && e < 1.0) => {
                    return Err(Error::Scenario(format!(
                        "truncation ratio {e} outside (0, 1)"
                    )));
                }
                _ => {}
            }
        }
        if let SplittingPolicy::Greedy(p) = &self.splitting {
            p.validate()?;
        }
        self.policy.validate()?;
        let cg = self.cg_options();
        if !(cg.tol > 0.0) || cg.max_iters == 0 {
            return Err(Error::Scenario(format!("invalid CG options {cg:?}")));
        }
        Ok(())
    }

    pub fn cg_options(&self) -> CgOptions {
        self.cg.unwrap_or(ReducedConfig::pod().cg)
    }

    /// Solver configuration of a reduced mode.
    pub fn reduced_config(&self) -> ReducedConfig {
        let base = ReducedConfig::pod();
        let mut config = match self.mode {
            Mode::Full | Mode::Pod => base,
            Mode::Localglobal | Mode::Adaptive => ReducedConfig {
                splitting: self.splitting,
                enrich: true,
                ..base
            },
        };
        config.cg = self.cg_options();
        config.measure_unaugmented = self.measure_unaugmented;
        config
    }
}
