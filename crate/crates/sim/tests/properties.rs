//! Randomised invariants for dataset extraction, phase-duration jitter,
//! fault injection, and time warping.

use proptest::prelude::*;

use threetank_sim::augment::augment_time_warp;
use threetank_sim::dataset::{make_splits, SplitCounts, CHANNELS, INPUT_STEPS, WINDOW_STEPS};
use threetank_sim::rng::{stream_rng, ANOMALY_STREAM, AUGMENT_STREAM, SCHED_STREAM};
use threetank_sim::scenario::{
    inject_dead_sensor, inject_point_anomaly, jitter_durations,
};
use threetank_sim::{ControlInput, Sample, SimConfig, TimeSeries};

fn synthetic_series(len: usize) -> TimeSeries {
    let mut values = Vec::with_capacity(len * CHANNELS);
    for t in 0..len {
        for ch in 0..CHANNELS {
            values.push(t as f64 + ch as f64 / 10.0);
        }
    }
    TimeSeries {
        clean_values: values.clone(),
        values,
        phase_index: vec![0; len],
        controls: vec![ControlInput::ZERO; len],
    }
}

fn arbitrary_sample(seed: u64) -> Sample {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut rng = stream_rng(seed, 98);
    let input = (0..INPUT_STEPS * CHANNELS)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let target = (0..(WINDOW_STEPS - INPUT_STEPS) * CHANNELS)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Sample::new(input, target, 0).unwrap()
}

proptest! {
    // 256 cases x 400 draws puts more than 1e5 window origins through the
    // bound check.
    #[test]
    fn every_window_lies_inside_its_split_interval(seed in 0u64..1_000_000) {
        let series = synthetic_series(4000);
        let counts = SplitCounts { train: 280, val: 60, test: 60 };
        let ds = make_splits(&series, counts, (70, 15, 15), seed).unwrap();
        for (_, split) in ds.splits() {
            let (start, end) = split.interval;
            for s in &split.samples {
                prop_assert!(s.origin_step >= start);
                prop_assert!(s.origin_step + WINDOW_STEPS <= end);
            }
        }
    }

    #[test]
    fn jittered_durations_are_positive_and_cover_the_run(
        seed in 0u64..1_000_000,
        sigma in 0.0f64..60.0,
        n_steps in 1usize..3000,
    ) {
        let cfg = SimConfig::standard();
        let mut rng = stream_rng(seed, SCHED_STREAM);
        let durations = jitter_durations(&cfg, sigma, n_steps, &mut rng);
        prop_assert!(durations.iter().all(|&d| d >= 1));
        let total: usize = durations.iter().sum();
        prop_assert!(total >= n_steps);
        // Minimal: dropping the last occurrence stops covering the run.
        prop_assert!(total - durations.last().unwrap() < n_steps);
    }

    #[test]
    fn fault_injection_never_touches_tail_or_target(
        seed in 0u64..1_000_000,
        tail in 1usize..INPUT_STEPS,
        magnitude in 0.0f64..2.0,
    ) {
        let sample = arbitrary_sample(17);
        let mut rng = stream_rng(seed, ANOMALY_STREAM);
        let tail_cells = (INPUT_STEPS - tail) * CHANNELS;
        let point = inject_point_anomaly(&sample, magnitude, tail, &mut rng).unwrap();
        prop_assert_eq!(&point.input[tail_cells..], &sample.input[tail_cells..]);
        prop_assert_eq!(&point.target, &sample.target);
        let dead = inject_dead_sensor(&sample, tail, &mut rng).unwrap();
        prop_assert_eq!(&dead.input[tail_cells..], &sample.input[tail_cells..]);
        prop_assert_eq!(&dead.target, &sample.target);
    }

    #[test]
    fn time_warp_output_stays_within_channel_bounds(
        seed in 0u64..1_000_000,
        jitter in 0.0f64..500.0,
    ) {
        let sample = arbitrary_sample(23);
        let mut rng = stream_rng(seed, AUGMENT_STREAM);
        let out = augment_time_warp(&sample, jitter, &mut rng).unwrap();
        for ch in 0..CHANNELS {
            let cells = |s: &Sample| -> Vec<f64> {
                (0..WINDOW_STEPS)
                    .map(|t| {
                        if t < INPUT_STEPS {
                            s.input[t * CHANNELS + ch]
                        } else {
                            s.target[(t - INPUT_STEPS) * CHANNELS + ch]
                        }
                    })
                    .collect()
            };
            let orig = cells(&sample);
            let lo = orig.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = orig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in cells(&out) {
                prop_assert!(v >= lo && v <= hi);
            }
        }
    }
}
