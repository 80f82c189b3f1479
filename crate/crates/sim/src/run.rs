//! Phase scheduling, the observation-step loop, and series export.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::config::SimConfig;
use crate::dynamics::step;
use crate::rng::{stream_rng, NOISE_STREAM};
use crate::scenario::jitter_durations;
use crate::state::ControlInput;
use crate::{Result, SimError};

/// One generated run: per-step noisy readings, the noise-free levels, the
/// active phase, and the effective (trend-scaled) controls.
///
/// Row `t` holds the state committed at the end of observation step `t`
/// (the initial state is not emitted), and `phase_index[t]` is the phase
/// that governed that step.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    /// `[T x 3]` row-major sensor readings (levels plus Gaussian noise).
    pub values: Vec<f64>,
    /// `[T x 3]` row-major noise-free levels.
    pub clean_values: Vec<f64>,
    /// Which phase of the cycle was active at each step.
    pub phase_index: Vec<usize>,
    /// Effective control at each step (inflows already trend-scaled).
    pub controls: Vec<ControlInput>,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.phase_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phase_index.is_empty()
    }

    pub fn row(&self, t: usize) -> [f64; 3] {
        [self.values[t * 3], self.values[t * 3 + 1], self.values[t * 3 + 2]]
    }

    pub fn clean_row(&self, t: usize) -> [f64; 3] {
        [
            self.clean_values[t * 3],
            self.clean_values[t * 3 + 1],
            self.clean_values[t * 3 + 2],
        ]
    }

    /// SHA-256 over the exact bit patterns of the emitted matrices; equal
    /// checksums mean bit-identical runs.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for &v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        for &v in &self.clean_values {
            hasher.update(v.to_le_bytes());
        }
        for &p in &self.phase_index {
            hasher.update((p as u64).to_le_bytes());
        }
        hex(&hasher.finalize())
    }

    /// CSV export: a `# config_hash=` comment line, a header, then one row
    /// per step at 9 significant digits, LF line endings.
    pub fn export_csv(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "# config_hash={config_hash}")?;
        writeln!(w, "step,phase,h1,h2,h3,h1_clean,h2_clean,h3_clean")?;
        for t in 0..self.len() {
            let v = self.row(t);
            let c = self.clean_row(t);
            writeln!(
                w,
                "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e},{:.8e}",
                t, self.phase_index[t], v[0], v[1], v[2], c[0], c[1], c[2]
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Multiplier applied to the inflows at `global_step`: a slow cosine about
/// `trend_baseline`, clamped at zero.
pub fn trend_factor(config: &SimConfig, global_step: usize) -> f64 {
    let phase = TAU * global_step as f64 / config.trend_period_steps as f64;
    (config.trend_baseline + config.trend_amplitude * phase.cos()).max(0.0)
}

/// Which phase governs `global_step`, and its control with the inflow trend
/// applied.
///
/// Occurrence `k` of the repeating cycle lasts `duration_overrides[k]` steps
/// when that entry exists (scenario jitter fills it), else the phase's own
/// nominal duration.
pub fn phase_control(config: &SimConfig, global_step: usize) -> (ControlInput, usize) {
    let n = config.phases.len();
    let (occurrence, _start) = locate_occurrence(config, global_step);
    let phase = &config.phases[occurrence % n];
    let factor = trend_factor(config, global_step);
    let mut control = phase.control;
    control.q1 *= factor;
    control.q3 *= factor;
    (control, occurrence % n)
}

/// Find the phase occurrence containing `global_step`; returns the
/// occurrence index and its first step.
fn locate_occurrence(config: &SimConfig, global_step: usize) -> (usize, usize) {
    let n = config.phases.len();
    if config.duration_overrides.is_empty() {
        // Pure cyclic schedule: jump whole cycles, then walk one cycle.
        let cycle = config.cycle_steps();
        let cycles_done = global_step / cycle;
        let mut pos = cycles_done * cycle;
        let mut occurrence = cycles_done * n;
        loop {
            let d = config.phases[occurrence % n].duration_steps;
            if global_step < pos + d {
                return (occurrence, pos);
            }
            pos += d;
            occurrence += 1;
        }
    }
    let mut pos = 0;
    let mut occurrence = 0;
    loop {
        let d = config
            .duration_overrides
            .get(occurrence)
            .copied()
            .unwrap_or(config.phases[occurrence % n].duration_steps);
        if global_step < pos + d {
            return (occurrence, pos);
        }
        pos += d;
        occurrence += 1;
    }
}

/// Generate `n_steps` observation steps from the config's initial state.
///
/// Each observation step resolves the active phase and trend-scaled control,
/// advances the state through `substeps` RK4 sub-steps, commits the result as
/// the clean row, and emits a noisy reading `clean + sigma * z` with three
/// standard-normal draws per step from the dedicated noise stream (drawn
/// even when `noise_sigma` is zero, so the stream stays aligned across
/// noise settings). A pure function of `(config, n_steps)`: same inputs,
/// bit-identical series.
pub fn run_simulation(config: &SimConfig, n_steps: usize) -> Result<TimeSeries> {
    config.validate()?;
    if n_steps == 0 {
        return Err(SimError::InvalidConfig("n_steps must be >= 1".into()));
    }
    let mut cfg = config.clone();
    if cfg.duration_jitter_sigma > 0.0 && cfg.duration_overrides.is_empty() {
        let mut sched = stream_rng(cfg.seed, crate::rng::SCHED_STREAM);
        cfg.duration_overrides = jitter_durations(&cfg, cfg.duration_jitter_sigma, n_steps, &mut sched);
    }

    let mut noise = stream_rng(cfg.seed, NOISE_STREAM);
    let mut state = cfg.initial_state;
    let mut out = TimeSeries {
        values: Vec::with_capacity(n_steps * 3),
        clean_values: Vec::with_capacity(n_steps * 3),
        phase_index: Vec::with_capacity(n_steps),
        controls: Vec::with_capacity(n_steps),
    };
    for t in 0..n_steps {
        let (control, phase_idx) = phase_control(&cfg, t);
        for s in 0..cfg.substeps {
            state = step(&state, &control, cfg.dt).map_err(|e| match e {
                SimError::IntegrationDiverged { context } => SimError::IntegrationDiverged {
                    context: format!("observation step {t}, sub-step {s}: {context}"),
                },
                other => other,
            })?;
        }
        let clean = state.as_array();
        out.clean_values.extend_from_slice(&clean);
        for &c in &clean {
            let z: f64 = noise.sample(StandardNormal);
            out.values.push(c + cfg.noise_sigma * z);
        }
        out.phase_index.push(phase_idx);
        out.controls.push(control);
    }
    Ok(out)
}
