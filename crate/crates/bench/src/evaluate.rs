//! Deployment-mode evaluation: mean squared forecast error in original
//! units, stamped with everything needed to reproduce the number.

use threetank_models::Model;
use threetank_sim::{Sample, ScenarioKind};
use threetank_train::{eval_batch_size, forecast_mse_original};

use crate::store::{Augmentation, EvalResult, Phase, RESULTS_SCHEMA_VERSION};
use crate::{BenchError, Result};

/// The provenance stamped onto an [`EvalResult`]: which scenario the test
/// set came from, the pipeline stage, and the reproduction key.
#[derive(Clone, Debug)]
pub struct EvalLabel {
    pub scenario: ScenarioKind,
    pub augmentation: Augmentation,
    pub phase: Phase,
    pub seed: u64,
    pub config_hash: String,
}

/// Score `model` on `test` in original (de-standardized) units, with
/// autoregressive decoders feeding on their own predictions. Errors on an
/// empty test set.
pub fn evaluate(model: &Model, test: &[Sample], label: EvalLabel) -> Result<EvalResult> {
    let mse = forecast_mse_original(model, test, eval_batch_size(model.kind()))?;
    let result = EvalResult {
        schema_version: RESULTS_SCHEMA_VERSION,
        model: model.kind(),
        scenario: label.scenario,
        augmentation: label.augmentation,
        phase: label.phase,
        test_mse: mse,
        n_samples: test.len(),
        seed: label.seed,
        config_hash: label.config_hash,
    };
    result.validate()?;
    Ok(result)
}

/// MSE of the persistence baseline, which repeats each window's last
/// observed row for all 50 target steps — the floor any learned model must
/// beat.
pub fn persistence_mse(samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(BenchError::Invalid("persistence baseline needs at least one sample".into()));
    }
    let cells = samples.len() * samples[0].target.len();
    let mut sq_sum = 0.0;
    for sample in samples {
        let last = sample.last_input_row();
        for (j, &t) in sample.target.iter().enumerate() {
            let d = last[j % 3] - t;
            sq_sum += d * d;
        }
    }
    Ok(sq_sum / cells as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use threetank_sim::{INPUT_STEPS, TARGET_STEPS};

    fn sample_with(last_row: [f64; 3], target_rows: &[[f64; 3]]) -> Sample {
        let mut input = vec![0.25; INPUT_STEPS * 3];
        input[(INPUT_STEPS - 1) * 3..].copy_from_slice(&last_row);
        let mut target = Vec::new();
        for r in 0..TARGET_STEPS {
            target.extend_from_slice(&target_rows[r % target_rows.len()]);
        }
        Sample::new(input, target, 0).unwrap()
    }

    #[test]
    fn persistence_mse_matches_a_hand_computed_case() {
        // Last row [1,2,3], every target row [2,2,5]: per-row squared errors
        // are (1-2)^2 + 0 + (3-5)^2 = 5, so the mean over 3 channels is 5/3.
        let s = sample_with([1.0, 2.0, 3.0], &[[2.0, 2.0, 5.0]]);
        let got = persistence_mse(&[s]).unwrap();
        assert!((got - 5.0 / 3.0).abs() < 1e-15, "got {got}");
    }

    #[test]
    fn persistence_is_zero_exactly_when_the_future_never_moves() {
        let s = sample_with([0.5, 0.25, 0.125], &[[0.5, 0.25, 0.125]]);
        assert_eq!(persistence_mse(&[s]).unwrap(), 0.0);
        assert!(persistence_mse(&[]).is_err());
    }
}
