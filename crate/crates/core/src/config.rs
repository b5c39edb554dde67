//! The run configuration file: scenario, baseline-scheme coefficients,
//! trainer, loss, and solver sections in one JSON document. Parsing
//! validates every section with path-qualified messages, and
//! parse -> serialize -> parse is a fixed point.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::sim::{self, ScenarioConfig};
use crate::solver::{GN_MAX_ITER, GN_TOL};
use crate::trainer::TrainConfig;
use crate::weight_net::ArchConfig;
use crate::weighting::WeightScheme;

/// Solver tolerances exposed in the config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_iterations: GN_MAX_ITER, tolerance: GN_TOL }
    }
}

/// Baseline scheme coefficient sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemesConfig {
    pub elevation: WeightScheme,
    pub sigma_eps: WeightScheme,
    pub gogps: WeightScheme,
}

impl Default for SchemesConfig {
    fn default() -> Self {
        Self {
            elevation: WeightScheme::elevation_default(),
            sigma_eps: WeightScheme::sigma_eps_default(),
            gogps: WeightScheme::gogps_default(),
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub schemes: SchemesConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub solver: SolverConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let (_, _, harsh) = sim::presets();
        Self {
            scenario: harsh,
            schemes: SchemesConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.schemes.elevation.validate()?;
        self.schemes.sigma_eps.validate()?;
        self.schemes.gogps.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.solver.max_iterations == 0 {
            return Err(Error::InvalidConfig {
                path: "solver.max_iterations".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.solver.tolerance.is_nan() || self.solver.tolerance < 0.0 {
            return Err(Error::InvalidConfig {
                path: "solver.tolerance".into(),
                message: "must be non-negative".into(),
            });
        }
        if self.arch.d_model == 0 || self.arch.ff_width == 0 || self.arch.n_layers == 0 {
            return Err(Error::InvalidConfig {
                path: "arch".into(),
                message: "model dimensions must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidConfig {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
