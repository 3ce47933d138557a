//! TOML run configuration.

use std::path::Path;

use diffhmm_core::diffusion::{LyapunovSpec, ModelConfig};
use diffhmm_core::hmm::TailWeight;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub lyapunov: LyapunovSpec,
    #[serde(default)]
    pub approximation: ApproximationConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// One `[lo, hi]` pair per axis.
    pub bounds: Vec<[f64; 2]>,
    /// Nodes per axis.
    pub resolution: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApproximationConfig {
    pub kappa: f64,
    pub cells_per_axis: usize,
    /// Truncation level; absent means the whole grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r0: Option<f64>,
    pub epsilon: f64,
    /// Resolvent parameters range over `[delta, 1/delta]`.
    pub delta: f64,
    pub tail_weight: TailWeight,
    pub times: Vec<f64>,
}

impl Default for ApproximationConfig {
    fn default() -> Self {
        Self {
            kappa: 20.0,
            cells_per_axis: 64,
            r0: None,
            epsilon: 0.1,
            delta: 0.5,
            tail_weight: TailWeight::QuarticRoot,
            times: vec![0.25, 0.5, 1.0, 2.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub seed: u64,
    pub paths: usize,
    pub dt: f64,
    pub horizon: f64,
    pub x0: Vec<f64>,
    /// Resolvent parameter for the Monte Carlo resolvent row.
    pub alpha: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { seed: 1, paths: 10_000, dt: 1e-3, horizon: 1.0, x0: vec![0.0], alpha: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Rejects inconsistent values; logs a warning when `kappa < 1/delta`.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let g = &self.grid;
        if g.bounds.is_empty() || g.bounds.len() != g.resolution.len() {
            return bad(format!("grid: {} bounds vs {} resolutions", g.bounds.len(), g.resolution.len()));
        }
        let a = &self.approximation;
        if !(a.epsilon > 0.0) {
            return bad(format!("approximation.epsilon must be positive, got {}", a.epsilon));
        }
        if !(a.delta > 0.0 && a.delta < 1.0) {
            return bad(format!("approximation.delta must lie in (0, 1), got {}", a.delta));
        }
        if !(a.kappa > 0.0) || a.cells_per_axis == 0 {
            return bad("approximation.kappa and cells_per_axis must be positive".into());
        }
        if a.times.iter().any(|t| !(*t >= 0.0)) {
            return bad("approximation.times must be nonnegative".into());
        }
        if let Some(r0) = a.r0 {
            if !(r0 > 0.0) {
                return bad(format!("approximation.r0 must be positive, got {r0}"));
            }
        }
        let s = &self.simulation;
        if !(s.dt > 0.0) || !(s.horizon > 0.0) || !(s.alpha > 0.0) || s.paths == 0 {
            return bad("simulation: dt, horizon, alpha and paths must be positive".into());
        }
        if s.x0.len() != g.bounds.len() {
            return bad(format!("simulation.x0 has {} coordinates, grid has {}", s.x0.len(), g.bounds.len()));
        }
        if a.kappa < 1.0 / a.delta {
            log::warn!("kappa = {} is below 1/delta = {}; uniform resolvent bounds assume kappa >= 1/delta", a.kappa, 1.0 / a.delta);
        }
        Ok(())
    }
}
