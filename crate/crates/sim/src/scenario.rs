//! The eight evaluation scenarios: the unmodified standard run, three
//! perturbations of it (sensor faults, tripled noise, jittered phase
//! durations), and four cycle rewrites that shift the generating process
//! itself (scaled flows and three phase-merge variants).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::config::{ProcessPhase, SimConfig};
use crate::dataset::{Sample, INPUT_STEPS};
use crate::state::ControlInput;
use crate::{Result, SimError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// The unmodified generating process.
    Standard,
    /// Standard process; test samples get injected point anomalies or dead
    /// sensors (sample-level corruption, the config is unchanged).
    SensorFaults,
    /// Sensor noise tripled.
    IncreasedNoise,
    /// Phase durations jittered per occurrence.
    VariablePhaseDuration,
    /// Every inflow and valve coefficient scaled up 50%.
    ScaledFlows,
    /// First fill phase merged with the emptying phase (6-phase cycle).
    IndepMerge,
    /// The merged cycle with an idle all-zero phase appended (7 phases).
    IndepMergeStable,
    /// Both valves between the tanks opened simultaneously, merging each
    /// consecutive mixing pair (5-phase cycle).
    DepMerge,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 8] = [
        ScenarioKind::Standard,
        ScenarioKind::SensorFaults,
        ScenarioKind::IncreasedNoise,
        ScenarioKind::VariablePhaseDuration,
        ScenarioKind::ScaledFlows,
        ScenarioKind::IndepMerge,
        ScenarioKind::IndepMergeStable,
        ScenarioKind::DepMerge,
    ];

    /// Short CLI name: `std` or `s1`..`s7`.
    pub fn cli_name(&self) -> &'static str {
        match self {
            ScenarioKind::Standard => "std",
            ScenarioKind::SensorFaults => "s1",
            ScenarioKind::IncreasedNoise => "s2",
            ScenarioKind::VariablePhaseDuration => "s3",
            ScenarioKind::ScaledFlows => "s4",
            ScenarioKind::IndepMerge => "s5",
            ScenarioKind::IndepMergeStable => "s6",
            ScenarioKind::DepMerge => "s7",
        }
    }

    /// Human-readable label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            ScenarioKind::Standard => "standard",
            ScenarioKind::SensorFaults => "sensor faults",
            ScenarioKind::IncreasedNoise => "increased noise",
            ScenarioKind::VariablePhaseDuration => "variable phase duration",
            ScenarioKind::ScaledFlows => "scaled flows",
            ScenarioKind::IndepMerge => "independent merge",
            ScenarioKind::IndepMergeStable => "independent merge + stable phase",
            ScenarioKind::DepMerge => "dependent merge",
        }
    }

    /// Scenarios whose corruption happens at the sample level rather than in
    /// the generating config.
    pub fn is_sample_level(&self) -> bool {
        matches!(self, ScenarioKind::SensorFaults)
    }
}

impl FromStr for ScenarioKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL
            .iter()
            .copied()
            .find(|k| k.cli_name() == s)
            .ok_or_else(|| {
                SimError::InvalidConfig(format!(
                    "unknown scenario '{s}' (expected one of std, s1..s7)"
                ))
            })
    }
}

/// Tunable strengths of the scenario transformations. Defaults are the
/// canonical benchmark values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioParams {
    /// Magnitude of an injected point anomaly (sign drawn uniformly).
    pub fault_magnitude: f64,
    /// Input steps at the end of the window that fault injection never
    /// touches.
    pub protected_tail: usize,
    /// Noise multiplier for the increased-noise scenario.
    pub noise_multiplier: f64,
    /// Std-dev (steps) of per-occurrence duration jitter.
    pub duration_jitter_sigma: f64,
    /// Multiplier on every inflow and valve coefficient.
    pub flow_scale: f64,
    /// Duration of the appended idle phase.
    pub stable_duration: usize,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            fault_magnitude: 0.5,
            protected_tail: 25,
            noise_multiplier: 3.0,
            duration_jitter_sigma: 10.0,
            flow_scale: 1.5,
            stable_duration: 50,
        }
    }
}

/// A scenario choice plus the base config it perturbs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub params: ScenarioParams,
    pub base: SimConfig,
}

impl ScenarioSpec {
    pub fn new(kind: ScenarioKind, base: SimConfig) -> Self {
        Self { kind, params: ScenarioParams::default(), base }
    }
}

/// Derive the generating config for a scenario. The base config is never
/// mutated; sample-level scenarios (standard, sensor faults) return it
/// unchanged.
pub fn build_scenario(spec: &ScenarioSpec) -> Result<SimConfig> {
    let mut cfg = spec.base.clone();
    match spec.kind {
        ScenarioKind::Standard | ScenarioKind::SensorFaults => {}
        ScenarioKind::IncreasedNoise => {
            cfg.noise_sigma *= spec.params.noise_multiplier;
        }
        ScenarioKind::VariablePhaseDuration => {
            cfg.duration_jitter_sigma = spec.params.duration_jitter_sigma;
        }
        ScenarioKind::ScaledFlows => {
            for phase in &mut cfg.phases {
                phase.control = phase.control.scaled(spec.params.flow_scale);
            }
        }
        ScenarioKind::IndepMerge => {
            cfg.phases = merged_fill_empty_cycle(&spec.base)?;
        }
        ScenarioKind::IndepMergeStable => {
            cfg.phases = merged_fill_empty_cycle(&spec.base)?;
            cfg.phases.push(ProcessPhase::new(
                "stable",
                spec.params.stable_duration,
                ControlInput::ZERO,
            ));
        }
        ScenarioKind::DepMerge => {
            cfg.phases = merged_mixing_cycle(&spec.base)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_standard_cycle(base: &SimConfig) -> Result<()> {
    if base.phases.len() != 7 {
        return Err(SimError::InvalidConfig(format!(
            "phase-merge scenarios are defined on the 7-phase standard cycle, got {} phases",
            base.phases.len()
        )));
    }
    Ok(())
}

fn merge_phases(a: &ProcessPhase, b: &ProcessPhase) -> ProcessPhase {
    ProcessPhase {
        name: format!("{}+{}", a.name, b.name),
        duration_steps: a.duration_steps,
        control: a.control.combined_max(&b.control),
    }
}

/// 6-phase cycle: the first fill runs simultaneously with the emptying
/// phase; the cycle keeps its second fill.
fn merged_fill_empty_cycle(base: &SimConfig) -> Result<Vec<ProcessPhase>> {
    require_standard_cycle(base)?;
    let p = &base.phases;
    Ok(vec![
        merge_phases(&p[0], &p[6]),
        p[1].clone(),
        p[2].clone(),
        p[3].clone(),
        p[4].clone(),
        p[5].clone(),
    ])
}

/// 5-phase cycle: each consecutive mixing pair becomes one phase with both
/// inter-tank valves open.
fn merged_mixing_cycle(base: &SimConfig) -> Result<Vec<ProcessPhase>> {
    require_standard_cycle(base)?;
    let p = &base.phases;
    Ok(vec![
        p[0].clone(),
        merge_phases(&p[1], &p[2]),
        p[3].clone(),
        merge_phases(&p[4], &p[5]),
        p[6].clone(),
    ])
}

/// Per-occurrence phase durations for a jittered run: occurrence k lasts
/// `max(1, round(nominal + N(0, sigma^2)))` steps. Draws continue until the
/// schedule covers `n_steps` observation steps.
pub fn jitter_durations(
    config: &SimConfig,
    sigma_steps: f64,
    n_steps: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let n = config.phases.len();
    let mut durations = Vec::new();
    let mut covered = 0usize;
    while covered < n_steps {
        let nominal = config.phases[durations.len() % n].duration_steps as f64;
        let z: f64 = rng.sample(StandardNormal);
        let d = (nominal + sigma_steps * z).round().max(1.0) as usize;
        durations.push(d);
        covered += d;
    }
    durations
}

/// Add a spike of `±fault_magnitude` to one input cell (one sensor, one
/// step), leaving the last `protected_tail` input steps and the whole target
/// untouched.
pub fn inject_point_anomaly(
    sample: &Sample,
    fault_magnitude: f64,
    protected_tail: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    if protected_tail >= INPUT_STEPS {
        return Err(SimError::EmptyRange(format!(
            "protected tail {protected_tail} leaves no input step to corrupt"
        )));
    }
    let candidate_steps = INPUT_STEPS - protected_tail;
    let sensor = rng.gen_range(0..3usize);
    let t = rng.gen_range(0..candidate_steps);
    let spike = if rng.gen_bool(0.5) { fault_magnitude } else { -fault_magnitude };
    let mut out = sample.clone();
    out.input[t * 3 + sensor] += spike;
    Ok(out)
}

/// Zero one sensor for a contiguous run of 1..=50 steps that ends before the
/// protected tail; the target window is untouched.
pub fn inject_dead_sensor(
    sample: &Sample,
    protected_tail: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    if protected_tail >= INPUT_STEPS {
        return Err(SimError::EmptyRange(format!(
            "protected tail {protected_tail} leaves no input step to corrupt"
        )));
    }
    let limit = INPUT_STEPS - protected_tail;
    let max_len = limit.min(50);
    let sensor = rng.gen_range(0..3usize);
    let d = rng.gen_range(1..=max_len);
    let start = rng.gen_range(0..=limit - d);
    let mut out = sample.clone();
    for t in start..start + d {
        out.input[t * 3 + sensor] = 0.0;
    }
    Ok(out)
}

/// Corrupt a set of samples for the sensor-fault scenario: a seeded shuffle
/// assigns half to point anomalies (odd counts round up) and the rest to
/// dead sensors.
pub fn apply_scenario1(
    samples: &[Sample],
    params: &ScenarioParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sample>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let n_point = samples.len().div_ceil(2);
    let mut out: Vec<Sample> = samples.to_vec();
    for (pos, &idx) in order.iter().enumerate() {
        out[idx] = if pos < n_point {
            inject_point_anomaly(&samples[idx], params.fault_magnitude, params.protected_tail, rng)?
        } else {
            inject_dead_sensor(&samples[idx], params.protected_tail, rng)?
        };
    }
    Ok(out)
}
