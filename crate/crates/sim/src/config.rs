//! Simulation parameters, loadable from TOML or JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::SimError;

/// All knobs of a simulation run. Every field has a default, so a config
/// file only needs to name what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Output dimension `m` of every weight matrix.
    pub dim_out: usize,
    /// Input dimension `n`.
    pub dim_in: usize,
    /// Adapter rank `r`.
    pub rank: usize,
    /// Samples `N` per task.
    pub samples_per_task: usize,
    /// Gradient steps per stage.
    pub steps: usize,
    /// Step size; `None` selects `1 / lambda_max` of the stage
    /// objective's data curvature, the largest provably monotone rate.
    pub learning_rate: Option<f64>,
    /// Fraction `p` of harmful data mixed into user fine-tuning.
    pub harmful_ratio: f64,
    /// Seed for world generation and adapter initialization.
    pub seed: u64,
    /// Orthogonalization strength for the final merge.
    pub alpha: f64,
    /// Effective-rank threshold for the final merge.
    pub tau: f64,
    /// Number of independent weight matrices ("layers"); 1 by default.
    pub matrices: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dim_out: 16,
            dim_in: 16,
            rank: 4,
            samples_per_task: 64,
            steps: 500,
            learning_rate: None,
            harmful_ratio: 0.5,
            seed: 7,
            alpha: 0.1,
            tau: 1e-6,
            matrices: 1,
        }
    }
}

impl SimConfig {
    /// Checks every field's range.
    ///
    /// # Errors
    ///
    /// Any dimension or count of zero, `dim_in < 3` (the three task
    /// blocks each need a coordinate), rank above `min(m, n)`,
    /// `harmful_ratio` outside `[0, 1]`, a non-positive explicit
    /// learning rate, `alpha` outside `[0, 1]`, or `tau` outside `(0, 1)`.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.dim_out == 0 || self.dim_in == 0 {
            return Err(SimError::invalid("config", "dimensions must be positive"));
        }
        if self.dim_in < 3 {
            return Err(SimError::invalid(
                "config",
                format!("dim_in must be at least 3 to hold three task blocks, got {}", self.dim_in),
            ));
        }
        if self.rank == 0 || self.rank > self.dim_out.min(self.dim_in) {
            return Err(SimError::invalid(
                "config",
                format!(
                    "rank must lie in [1, min(dim_out, dim_in)] = [1, {}], got {}",
                    self.dim_out.min(self.dim_in),
                    self.rank
                ),
            ));
        }
        if self.samples_per_task == 0 {
            return Err(SimError::invalid("config", "samples_per_task must be at least 1"));
        }
        if self.steps == 0 {
            return Err(SimError::invalid("config", "steps must be at least 1"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(SimError::invalid(
                    "config",
                    format!("learning_rate must be positive and finite, got {lr}"),
                ));
            }
        }
        if !(self.harmful_ratio.is_finite() && (0.0..=1.0).contains(&self.harmful_ratio)) {
            return Err(SimError::invalid(
                "config",
                format!("harmful_ratio must lie in [0, 1], got {}", self.harmful_ratio),
            ));
        }
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            return Err(SimError::invalid(
                "config",
                format!("alpha must lie in [0, 1], got {}", self.alpha),
            ));
        }
        if !(self.tau.is_finite() && self.tau > 0.0 && self.tau < 1.0) {
            return Err(SimError::invalid(
                "config",
                format!("tau must lie in (0, 1), got {}", self.tau),
            ));
        }
        if self.matrices == 0 {
            return Err(SimError::invalid("config", "matrices must be at least 1"));
        }
        Ok(())
    }

    /// Loads and validates a config from a `.toml` or `.json` file,
    /// dispatching on the extension.
    ///
    /// # Errors
    ///
    /// Unreadable file, unknown extension, parse failure, or any
    /// [`SimConfig::validate`] failure.
    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| SimError::Io { path: path.to_path_buf(), source })?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        let cfg: SimConfig = match ext.to_ascii_lowercase().as_str() {
            "toml" => toml::from_str(&text).map_err(|e| SimError::ConfigParse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?,
            "json" => serde_json::from_str(&text).map_err(|e| SimError::ConfigParse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?,
            other => {
                return Err(SimError::ConfigParse {
                    path: path.to_path_buf(),
                    reason: format!("unsupported config extension `{other}` (use .toml or .json)"),
                })
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
