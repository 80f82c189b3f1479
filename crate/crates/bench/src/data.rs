//! Dataset construction for every scenario: simulate the scenario's
//! configuration, carve chronological splits, and apply sample-level
//! corruption or training-set augmentation where a recipe calls for it.

use threetank_sim::augment::{augment_sample, AugmentParams};
use threetank_sim::hashing;
use threetank_sim::rng::{stream_rng, ANOMALY_STREAM, AUGMENT_STREAM};
use threetank_sim::scenario::{apply_scenario1, build_scenario};
use threetank_sim::{
    dataset::make_splits, run_simulation, Dataset, DatasetMeta, ScenarioKind, ScenarioParams,
    ScenarioSpec, SimConfig, SplitCounts,
};

use crate::store::Augmentation;
use crate::Result;

/// Steps simulated as the source series for every dataset: 40 cycles of the
/// standard 350-step process, enough for generously separated splits.
pub const SOURCE_STEPS: usize = 14000;

/// Chronological split proportions: first 80% train, next 10% validation,
/// final 10% test.
pub const SPLIT_PROPORTIONS: (u32, u32, u32) = (8, 1, 1);

/// The simulation configuration for `kind` at `seed`: the frozen standard
/// configuration with its seed replaced, passed through the scenario
/// transformation.
pub fn scenario_sim_config(kind: ScenarioKind, seed: u64) -> Result<SimConfig> {
    let mut base = SimConfig::standard();
    base.seed = seed;
    let spec = ScenarioSpec::new(kind, base);
    Ok(build_scenario(&spec)?)
}

/// Simulate scenario `kind` at `seed` and carve `counts` windows per split.
/// The sensor-fault scenario additionally corrupts the drawn samples, with
/// one anomaly-stream generator shared across train, validation, and test in
/// that order.
pub fn scenario_dataset(
    kind: ScenarioKind,
    counts: SplitCounts,
    seed: u64,
) -> Result<(Dataset, DatasetMeta)> {
    let cfg = scenario_sim_config(kind, seed)?;
    let config_hash = hashing::config_hash(&cfg)?;
    let series = run_simulation(&cfg, SOURCE_STEPS)?;
    let mut dataset = make_splits(&series, counts, SPLIT_PROPORTIONS, seed)?;
    if kind.is_sample_level() {
        let params = ScenarioParams::default();
        let mut rng = stream_rng(seed, ANOMALY_STREAM);
        for split in [&mut dataset.train, &mut dataset.val, &mut dataset.test] {
            split.samples = apply_scenario1(&split.samples, &params, &mut rng)?;
        }
    }
    let meta = DatasetMeta::new(
        kind.cli_name(),
        seed,
        &config_hash,
        counts,
        SPLIT_PROPORTIONS,
        series.len(),
        &dataset,
    );
    Ok((dataset, meta))
}

/// The augmentation strengths behind each named augmentation: the canonical
/// noise level with warping disabled, or the canonical warp jitter with
/// noise disabled.
pub fn augmentation_params(aug: Augmentation) -> Option<AugmentParams> {
    match aug {
        Augmentation::None => None,
        Augmentation::Noise => Some(AugmentParams { time_warp_jitter: 0.0, ..AugmentParams::default() }),
        Augmentation::Warp => Some(AugmentParams { noise_sigma: 0.0, ..AugmentParams::default() }),
    }
}

/// The fine-tuning dataset for augmentation experiments: the standard
/// dataset with every training sample passed once through `aug`, while
/// validation and test stay clean so selection and scoring measure true
/// forecasting error.
pub fn augmented_standard_dataset(
    aug: Augmentation,
    counts: SplitCounts,
    seed: u64,
) -> Result<(Dataset, DatasetMeta)> {
    let (mut dataset, meta) = scenario_dataset(ScenarioKind::Standard, counts, seed)?;
    if let Some(params) = augmentation_params(aug) {
        let mut rng = stream_rng(seed, AUGMENT_STREAM);
        let mut augmented = Vec::with_capacity(dataset.train.samples.len());
        for sample in &dataset.train.samples {
            augmented.push(augment_sample(sample, &params, &mut rng)?);
        }
        dataset.train.samples = augmented;
    }
    Ok((dataset, meta))
}
