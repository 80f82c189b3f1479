//! Per-channel standardization. Statistics come from the training split
//! only and travel with the model so evaluation always happens in original
//! units.

use threetank_autodiff::Tensor;
use threetank_sim::{Sample, INPUT_STEPS, TARGET_STEPS};

use crate::{ModelError, Result};

const STD_FLOOR: f64 = 1e-8;

/// Per-channel affine normalization: x -> (x - mean) / std.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Standardizer {
    /// No-op standardizer (mean 0, std 1).
    pub fn identity() -> Self {
        Self { mean: [0.0; 3], std: [1.0; 3] }
    }

    /// Fit per-channel mean and standard deviation over every input and
    /// target cell of the given samples (the training split). Stds are
    /// floored to keep the transform invertible on constant channels.
    pub fn fit(samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(ModelError::InvalidConfig(
                "cannot fit standardizer on an empty sample set".into(),
            ));
        }
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        for s in samples {
            for row in 0..INPUT_STEPS {
                for c in 0..3 {
                    sum[c] += s.input_cell(row, c);
                }
            }
            for row in 0..TARGET_STEPS {
                for c in 0..3 {
                    sum[c] += s.target_cell(row, c);
                }
            }
            count += INPUT_STEPS + TARGET_STEPS;
        }
        let mean = [sum[0] / count as f64, sum[1] / count as f64, sum[2] / count as f64];
        let mut sq = [0.0f64; 3];
        for s in samples {
            for row in 0..INPUT_STEPS {
                for c in 0..3 {
                    let d = s.input_cell(row, c) - mean[c];
                    sq[c] += d * d;
                }
            }
            for row in 0..TARGET_STEPS {
                for c in 0..3 {
                    let d = s.target_cell(row, c) - mean[c];
                    sq[c] += d * d;
                }
            }
        }
        let std = [
            (sq[0] / count as f64).sqrt().max(STD_FLOOR),
            (sq[1] / count as f64).sqrt().max(STD_FLOOR),
            (sq[2] / count as f64).sqrt().max(STD_FLOOR),
        ];
        for c in 0..3 {
            if !mean[c].is_finite() || !std[c].is_finite() {
                return Err(ModelError::InvalidConfig(format!(
                    "non-finite standardizer statistics on channel {c}"
                )));
            }
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, channel: usize, value: f64) -> f64 {
        (value - self.mean[channel]) / self.std[channel]
    }

    pub fn invert(&self, channel: usize, value: f64) -> f64 {
        value * self.std[channel] + self.mean[channel]
    }

    /// Normalized input batch `[len(idx), 250, 3]` gathered by index.
    pub fn batch_input(&self, samples: &[Sample], idx: &[usize]) -> Tensor {
        let b = idx.len();
        let mut data = Vec::with_capacity(b * INPUT_STEPS * 3);
        for &i in idx {
            for row in 0..INPUT_STEPS {
                for c in 0..3 {
                    data.push(self.apply(c, samples[i].input_cell(row, c)));
                }
            }
        }
        Tensor::new(&[b, INPUT_STEPS, 3], data).expect("sized by construction")
    }

    /// Normalized target batch `[len(idx), 50, 3]` gathered by index.
    pub fn batch_target(&self, samples: &[Sample], idx: &[usize]) -> Tensor {
        let b = idx.len();
        let mut data = Vec::with_capacity(b * TARGET_STEPS * 3);
        for &i in idx {
            for row in 0..TARGET_STEPS {
                for c in 0..3 {
                    data.push(self.apply(c, samples[i].target_cell(row, c)));
                }
            }
        }
        Tensor::new(&[b, TARGET_STEPS, 3], data).expect("sized by construction")
    }

    /// Map a flat `[.., 3]` buffer of standardized values back to original
    /// units in place.
    pub fn denormalize_flat(&self, data: &mut [f64]) {
        assert!(data.len() % 3 == 0, "flat buffer must be channel-major [.., 3]");
        for (i, v) in data.iter_mut().enumerate() {
            *v = self.invert(i % 3, *v);
        }
    }
}
