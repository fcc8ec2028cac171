//! Experiment configuration files.
//!
//! Every key is optional; each experiment fills in its own defaults.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use pulsecool::baselines::GGrid;
use pulsecool::ModelParams;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Swap,
    Figure1,
    Figure2,
    NauxStudy,
    TwoAux,
    Sideband,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Swap => "swap",
            Experiment::Figure1 => "figure1",
            Experiment::Figure2 => "figure2",
            Experiment::NauxStudy => "naux_study",
            Experiment::TwoAux => "two_aux",
            Experiment::Sideband => "sideband",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must match the subcommand when present.
    pub experiment: Option<Experiment>,
    /// Model parameters (figure2, naux_study, two_aux, and the n_T used by
    /// figure1/sideband panels).
    pub params: Option<ModelParams>,
    /// γ·n_T panel values; γ = value / n_T.
    pub gamma_nt: Option<Vec<f64>>,
    pub kappa_grid: Option<Vec<f64>>,
    pub time_grid: Option<Vec<f64>>,
    pub n_segments: Option<usize>,
    /// figure1: segments per period of control time (ignored if
    /// `n_segments` is set).
    pub segments_per_period: Option<f64>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub output_path: Option<PathBuf>,
    pub cutoffs: Option<[usize; 2]>,
    pub g_max: Option<f64>,
    pub max_iterations: Option<usize>,
    /// swap: re-optimize after checking the reference pulses.
    pub optimize: Option<bool>,
    /// naux_study: the nonzero auxiliary occupation.
    pub n_aux: Option<f64>,
    /// two_aux: damping of the second auxiliary; defaults to the first's.
    pub second_kappa: Option<f64>,
    /// sideband: coarse coupling grid.
    pub g_grid: Option<GGrid>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok((Self::from_json(text)?, bytes))
    }

    /// Structural checks that do not depend on the experiment.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, reason: &str| Err(CliError::Config(format!("{field}: {reason}")));
        for (name, grid) in [("gamma_nt", &self.gamma_nt), ("kappa_grid", &self.kappa_grid), ("time_grid", &self.time_grid)] {
            if let Some(g) = grid {
                if g.is_empty() {
                    return bad(name, "must not be empty");
                }
                if g.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                    return bad(name, "entries must be positive and finite");
                }
            }
        }
        if self.n_segments == Some(0) {
            return bad("n_segments", "must be at least 1");
        }
        if let Some(s) = self.segments_per_period {
            if !(s.is_finite() && s > 0.0) {
                return bad("segments_per_period", "must be positive");
            }
        }
        if self.restarts == Some(0) {
            return bad("restarts", "must be at least 1");
        }
        if let Some(g) = self.g_max {
            if !(g.is_finite() && g > 0.0) {
                return bad("g_max", "must be positive");
            }
        }
        if let Some([a, b]) = self.cutoffs {
            if a < 2 || b < 2 {
                return bad("cutoffs", "need at least two levels per mode");
            }
        }
        if let Some(n) = self.n_aux {
            if !(n.is_finite() && n >= 0.0) {
                return bad("n_aux", "must be non-negative");
            }
        }
        if let Some(k) = self.second_kappa {
            if !(k.is_finite() && k >= 0.0) {
                return bad("second_kappa", "must be non-negative");
            }
        }
        if self.max_iterations == Some(0) {
            return bad("max_iterations", "must be at least 1");
        }
        Ok(())
    }

    /// Reject a config written for a different experiment.
    pub fn check_experiment(&self, expected: Experiment) -> Result<(), CliError> {
        match self.experiment {
            Some(e) if e != expected => Err(CliError::Config(format!(
                "config is for {} but the subcommand runs {}",
                e.name(),
                expected.name()
            ))),
            _ => Ok(()),
        }
    }
}
