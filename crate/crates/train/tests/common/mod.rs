//! Shared fixtures: tiny hand-built datasets of smooth windows.
#![allow(dead_code)]

use threetank_sim::{Dataset, DatasetSplit, Sample, CHANNELS, INPUT_STEPS, WINDOW_STEPS};

/// A smooth window cut from a family of phase-shifted waves; distinct phases
/// give distinct, learnable samples.
pub fn wave_sample(phase: f64, amp: f64) -> Sample {
    let mut input = Vec::with_capacity(INPUT_STEPS * CHANNELS);
    let mut target = Vec::new();
    for t in 0..WINDOW_STEPS {
        for c in 0..CHANNELS {
            let v = amp * (0.045 * t as f64 + phase + 1.7 * c as f64).sin();
            if t < INPUT_STEPS {
                input.push(v);
            } else {
                target.push(v);
            }
        }
    }
    Sample::new(input, target, 0).unwrap()
}

/// A wave window whose target is a constant everywhere.
pub fn constant_target_sample(phase: f64, target_value: f64) -> Sample {
    let base = wave_sample(phase, 0.4);
    let target = vec![target_value; base.target.len()];
    Sample::new(base.input, target, 0).unwrap()
}

fn wave_split(n: usize, offset: f64) -> DatasetSplit {
    DatasetSplit {
        samples: (0..n).map(|i| wave_sample(offset + 0.37 * i as f64, 0.4)).collect(),
        interval: (0, WINDOW_STEPS),
    }
}

/// Disjoint phase ranges per split, standing in for disjoint source
/// intervals.
pub fn wave_dataset(n_train: usize, n_val: usize, n_test: usize) -> Dataset {
    Dataset {
        train: wave_split(n_train, 0.0),
        val: wave_split(n_val, 10.0),
        test: wave_split(n_test, 20.0),
    }
}
