//! Simulation configuration: the phase cycle plus all generation constants.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::state::{ControlInput, TankState};
use crate::{Result, SimError};

/// An interval of the process cycle during which all controls are constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessPhase {
    pub name: String,
    pub duration_steps: usize,
    pub control: ControlInput,
}

impl ProcessPhase {
    pub fn new(name: &str, duration_steps: usize, control: ControlInput) -> Self {
        Self { name: name.to_string(), duration_steps, control }
    }
}

/// Everything needed to generate a run: the phase cycle, integrator settings,
/// sensor-noise level, the long-term inflow trend, and the seed.
///
/// The canonical 'standard' values live in `configs/standard.toml`, versioned
/// with the repository; [`SimConfig::standard`] parses that file at compile
/// time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Integrator sub-step, in units of one observation step.
    pub dt: f64,
    /// Integrator sub-steps per observation step; `substeps * dt` must be
    /// exactly 1.0 so each emitted sample advances one step of simulated time.
    pub substeps: usize,
    pub noise_sigma: f64,
    pub trend_baseline: f64,
    pub trend_amplitude: f64,
    pub trend_period_steps: usize,
    /// Standard deviation (in steps) of per-occurrence phase-duration jitter;
    /// 0 disables jitter.
    #[serde(default)]
    pub duration_jitter_sigma: f64,
    pub initial_state: TankState,
    pub phases: Vec<ProcessPhase>,
    /// Explicit per-occurrence durations (occurrence k of the cycle uses
    /// entry k). Occurrences beyond the list fall back to the phase's own
    /// `duration_steps`. Filled by the scheduler when jitter is enabled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub duration_overrides: Vec<usize>,
}

impl SimConfig {
    /// The frozen 'standard' configuration from `configs/standard.toml`.
    pub fn standard() -> SimConfig {
        let text = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/standard.toml"));
        let cfg: SimConfig = toml::from_str(text).expect("bundled standard config must parse");
        cfg.validate().expect("bundled standard config must be valid");
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<SimConfig> {
        let cfg: SimConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SimConfig> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(SimError::InvalidConfig("phases must be non-empty".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidConfig(format!("dt = {} must be positive", self.dt)));
        }
        if self.substeps == 0 {
            return Err(SimError::InvalidConfig("substeps must be >= 1".into()));
        }
        if self.substeps as f64 * self.dt != 1.0 {
            return Err(SimError::InvalidConfig(format!(
                "substeps * dt must be exactly 1.0, got {} * {} = {}",
                self.substeps,
                self.dt,
                self.substeps as f64 * self.dt
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SimError::InvalidConfig(format!(
                "noise_sigma = {} must be finite and >= 0",
                self.noise_sigma
            )));
        }
        if !(self.trend_amplitude >= 0.0 && self.trend_amplitude.is_finite()) {
            return Err(SimError::InvalidConfig("trend_amplitude must be finite and >= 0".into()));
        }
        if !(self.trend_baseline >= 0.0 && self.trend_baseline.is_finite()) {
            return Err(SimError::InvalidConfig("trend_baseline must be finite and >= 0".into()));
        }
        if self.trend_period_steps == 0 {
            return Err(SimError::InvalidConfig("trend_period_steps must be >= 1".into()));
        }
        if !(self.duration_jitter_sigma >= 0.0 && self.duration_jitter_sigma.is_finite()) {
            return Err(SimError::InvalidConfig("duration_jitter_sigma must be finite and >= 0".into()));
        }
        self.initial_state.validate()?;
        for phase in &self.phases {
            if phase.duration_steps == 0 {
                return Err(SimError::InvalidConfig(format!(
                    "phase '{}' has zero duration",
                    phase.name
                )));
            }
            phase.control.validate().map_err(|e| {
                SimError::InvalidConfig(format!("phase '{}': {e}", phase.name))
            })?;
        }
        for (k, &d) in self.duration_overrides.iter().enumerate() {
            if d == 0 {
                return Err(SimError::InvalidConfig(format!(
                    "duration override {k} is zero"
                )));
            }
        }
        Ok(())
    }

    /// Steps in one full cycle at nominal durations.
    pub fn cycle_steps(&self) -> usize {
        self.phases.iter().map(|p| p.duration_steps).sum()
    }
}
