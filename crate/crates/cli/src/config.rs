//! Experiment configuration: one TOML file describing the mixture, the
//! dynamics, the solver, the step budgets, and the run size.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pfode_core::{
    EtaSchedule, GaussianMixture, LambdaKind, Parameterization, ResampleSpec, ScheduleFile,
    SolverPolicy,
};

use crate::{CliError, Result};

/// A complete experiment description.
///
/// Serializes to a single TOML document. Scalar fields come first so the
/// tables that follow them stay valid TOML; the field order here is the
/// serialization order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mixture JSON file, resolved relative to the config file's directory
    /// when not absolute.
    pub mixture: PathBuf,
    /// Trajectories per run; zero is allowed and produces empty reports.
    pub samples: usize,
    pub seed: u64,
    /// Where commands write their outputs; `--out` overrides it.
    pub output_dir: PathBuf,
    pub parameterization: Parameterization,
    pub policy: SolverPolicy,
    pub eta: EtaSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample: Option<ResampleSpec>,
}

impl ExperimentConfig {
    /// Parse and validate a config from TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serialize to TOML. Parsing the result yields back the same values,
    /// including every float bit.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Read a config file; the second return is the directory the config
    /// lives in, for resolving relative paths inside it.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = Self::from_toml(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((cfg, dir))
    }

    /// The mixture path with relative paths anchored at the config's
    /// directory.
    pub fn mixture_path(&self, config_dir: &Path) -> PathBuf {
        if self.mixture.is_absolute() {
            self.mixture.clone()
        } else {
            config_dir.join(&self.mixture)
        }
    }

    /// Field-level checks the serde layer cannot express, each reported
    /// with the offending field's path.
    fn validate(&self) -> Result<()> {
        EtaSchedule::new(self.eta.eta_min, self.eta.eta_max, self.eta.p)
            .map_err(|e| CliError::Usage(format!("eta: {e}")))?;
        if self.policy.lambda_kind == LambdaKind::Step {
            match self.policy.tau_k {
                Some(t) if t.is_finite() && t >= 0.0 => {}
                _ => {
                    return Err(CliError::Usage(
                        "policy: the step policy needs a finite tau_k >= 0".into(),
                    ))
                }
            }
        }
        if let Some(spec) = &self.resample {
            if !(spec.q.is_finite() && spec.q >= 0.0) {
                return Err(CliError::Usage(
                    "resample: q must be finite and nonnegative".into(),
                ));
            }
            if spec.n == 0 {
                return Err(CliError::Usage("resample: N must be positive".into()));
            }
        }
        if self.mixture.as_os_str().is_empty() {
            return Err(CliError::Usage("mixture: path must not be empty".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Usage("output_dir: path must not be empty".into()));
        }
        Ok(())
    }
}

/// Load a mixture JSON file (`{dim, components: [{weight, mean, cov}]}`).
pub fn load_mixture(path: &Path) -> Result<GaussianMixture> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read mixture {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("mixture {}: {e}", path.display())))
}

/// Load and revalidate a schedule JSON file.
pub fn load_schedule(path: &Path) -> Result<ScheduleFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read schedule {}: {e}", path.display())))?;
    ScheduleFile::from_json(&text)
        .map_err(|e| CliError::Usage(format!("schedule {}: {e}", path.display())))
}
