//! Training-set augmentation: additive Gaussian sensor noise on the input
//! window and a smooth time warp of the whole 300-step window.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Sample, CHANNELS, INPUT_STEPS, WINDOW_STEPS};
use crate::{Result, SimError};

/// Augmentation strengths. Defaults are the canonical values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    /// Std-dev of Gaussian noise added to input cells.
    pub noise_sigma: f64,
    /// Std-dev (steps) of the per-step time jitter.
    pub time_warp_jitter: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { noise_sigma: 0.02, time_warp_jitter: 3.0 }
    }
}

fn check_nonnegative(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(SimError::InvalidConfig(format!(
            "augmentation {name} must be finite and non-negative, got {v}"
        )));
    }
    Ok(())
}

/// Add `N(0, sigma^2)` to every input cell in row-major (step, channel)
/// order. The target window is left untouched: the model should learn to
/// forecast the uncorrupted future. Draws are consumed even at `sigma = 0`,
/// keeping downstream draws aligned across noise levels.
pub fn augment_noise(sample: &Sample, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    check_nonnegative("noise sigma", sigma)?;
    let mut out = sample.clone();
    for cell in out.input.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *cell += sigma * z;
    }
    Ok(out)
}

/// Resample the concatenated input‖target window at jittered times
/// `t_i = clamp(i + N(0, jitter^2), 0, 299)`, sorted ascending, with one
/// shared time grid for all channels and per-channel linear interpolation.
/// The warped window is re-split into input and target at step 250.
pub fn augment_time_warp(sample: &Sample, jitter: f64, rng: &mut ChaCha8Rng) -> Result<Sample> {
    check_nonnegative("time-warp jitter", jitter)?;
    let max_t = (WINDOW_STEPS - 1) as f64;
    let mut times: Vec<f64> = (0..WINDOW_STEPS)
        .map(|i| {
            let z: f64 = rng.sample(StandardNormal);
            (i as f64 + jitter * z).clamp(0.0, max_t)
        })
        .collect();
    times.sort_by(f64::total_cmp);

    // Work on the concatenated window, one channel at a time.
    let mut warped = vec![0.0; WINDOW_STEPS * CHANNELS];
    for ch in 0..CHANNELS {
        let value_at = |step: usize| -> f64 {
            if step < INPUT_STEPS {
                sample.input[step * CHANNELS + ch]
            } else {
                sample.target[(step - INPUT_STEPS) * CHANNELS + ch]
            }
        };
        for (i, &t) in times.iter().enumerate() {
            let i0 = (t.floor() as usize).min(WINDOW_STEPS - 2);
            let frac = t - i0 as f64;
            warped[i * CHANNELS + ch] =
                value_at(i0) * (1.0 - frac) + value_at(i0 + 1) * frac;
        }
    }

    let (input, target) = warped.split_at(INPUT_STEPS * CHANNELS);
    Sample::new(input.to_vec(), target.to_vec(), sample.origin_step)
}

/// Full augmentation of one sample: time warp first (a geometric change of
/// the underlying trajectory), then fresh sensor noise on the input window.
pub fn augment_sample(
    sample: &Sample,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<Sample> {
    let warped = augment_time_warp(sample, params.time_warp_jitter, rng)?;
    augment_noise(&warped, params.noise_sigma, rng)
}
