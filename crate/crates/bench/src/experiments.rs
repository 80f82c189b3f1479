//! The three experiment grids. Every table cell is identified by a config
//! hash over its full recipe (profile, architecture, protocol, scenarios,
//! seed); pipelines produce missing cells, a worker pool runs independent
//! pipelines in parallel, and one writer appends the merged results.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use threetank_models::{build_model, load_model, save_model, ArchConfig, ArchKind, Model, Standardizer};
use threetank_sim::augment::AugmentParams;
use threetank_sim::{hashing, ScenarioKind, SplitCounts};
use threetank_train::{fine_tune, train, TrainConfig};

use crate::data::{
    augmentation_params, augmented_standard_dataset, scenario_dataset, SOURCE_STEPS,
    SPLIT_PROPORTIONS,
};
use crate::evaluate::{evaluate, EvalLabel};
use crate::profile::Profile;
use crate::report::{self, ExperimentTable};
use crate::store::{Augmentation, EvalResult, Phase, ResultsStore, RESULTS_SCHEMA_VERSION};
use crate::{BenchError, Result};

/// Evaluation scenarios for the robustness grid: the training distribution
/// plus the three perturbation scenarios.
pub const EXP1_SCENARIOS: [ScenarioKind; 4] = [
    ScenarioKind::Standard,
    ScenarioKind::SensorFaults,
    ScenarioKind::IncreasedNoise,
    ScenarioKind::VariablePhaseDuration,
];

/// Fine-tuning scenarios for the adaptation grid: the four
/// out-of-distribution process variants.
pub const EXP2_SCENARIOS: [ScenarioKind; 4] = [
    ScenarioKind::ScaledFlows,
    ScenarioKind::IndepMerge,
    ScenarioKind::IndepMergeStable,
    ScenarioKind::DepMerge,
];

/// Evaluation scenarios for the augmentation grid.
pub const EXP3_SCENARIOS: [ScenarioKind; 3] =
    [ScenarioKind::Standard, ScenarioKind::SensorFaults, ScenarioKind::IndepMerge];

/// Everything an experiment invocation needs: the profile, which
/// architectures and seeds to cover, and where results live.
#[derive(Clone, Debug)]
pub struct RunnerConfig {
    pub profile: Profile,
    pub archs: Vec<ArchKind>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Recompute and supersede cells even when their hash is already stored.
    pub force: bool,
}

impl RunnerConfig {
    pub fn new(profile: Profile, out_dir: impl Into<PathBuf>) -> Self {
        RunnerConfig {
            profile,
            archs: ArchKind::ALL.to_vec(),
            seeds: profile.default_seeds(),
            out_dir: out_dir.into(),
            force: false,
        }
    }

    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join("results.jsonl")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join("run.toml")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.out_dir.join("checkpoints")
    }

    pub fn curves_dir(&self) -> PathBuf {
        self.out_dir.join("curves")
    }

    fn checkpoint_path(&self, arch: ArchKind, seed: u64) -> PathBuf {
        self.checkpoints_dir().join(format!("{}_std_seed{}.ckpt", arch.cli_name(), seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.archs.is_empty() {
            return Err(BenchError::Invalid("no architectures selected".into()));
        }
        if self.seeds.is_empty() {
            return Err(BenchError::Invalid("no seeds selected".into()));
        }
        let unique: BTreeSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(BenchError::Invalid(format!("duplicate seeds in {:?}", self.seeds)));
        }
        let unique: BTreeSet<_> = self.archs.iter().map(|a| a.cli_name()).collect();
        if unique.len() != self.archs.len() {
            return Err(BenchError::Invalid("duplicate architectures selected".into()));
        }
        Ok(())
    }
}

/// The serialized recipe whose hash keys a cell in the results store. Two
/// cells agree on their hash exactly when every ingredient that can move
/// the number agrees.
#[derive(Serialize)]
struct CellSpec<'a> {
    schema_version: u32,
    profile: &'static str,
    source_steps: usize,
    proportions: (u32, u32, u32),
    counts: SplitCounts,
    arch: &'a ArchConfig,
    train: &'a TrainConfig,
    fine_tune_scenario: Option<ScenarioKind>,
    augmentation: Augmentation,
    augment_params: Option<AugmentParams>,
    phase: Phase,
    eval_scenario: ScenarioKind,
    seed: u64,
}

/// One addressable table cell: its identity fields plus the reproduction
/// hash computed from them.
#[derive(Clone, Debug)]
pub(crate) struct CellId {
    pub phase: Phase,
    pub eval_scenario: ScenarioKind,
    pub augmentation: Augmentation,
    pub hash: String,
}

/// Compute the reproduction hash of a single cell. Phases before any
/// fine-tuning (`Trained`, `Epoch0`) carry no fine-tune scenario or
/// augmentation, so a cell computed standalone and the same cell recorded as
/// a fine-tune baseline share one identity.
pub(crate) fn cell_id(
    cfg: &RunnerConfig,
    arch: ArchKind,
    seed: u64,
    phase: Phase,
    eval_scenario: ScenarioKind,
    augmentation: Augmentation,
    fine_tune_scenario: Option<ScenarioKind>,
) -> Result<CellId> {
    debug_assert!(
        phase == Phase::Epoch50 || (augmentation == Augmentation::None && fine_tune_scenario.is_none()),
        "pre-fine-tuning phases identify the base model alone"
    );
    let arch_config = cfg.profile.arch_config(arch);
    let train_config = cfg.profile.train_config(seed);
    let spec = CellSpec {
        schema_version: RESULTS_SCHEMA_VERSION,
        profile: cfg.profile.name(),
        source_steps: SOURCE_STEPS,
        proportions: SPLIT_PROPORTIONS,
        counts: cfg.profile.counts(),
        arch: &arch_config,
        train: &train_config,
        fine_tune_scenario,
        augmentation,
        augment_params: augmentation_params(augmentation),
        phase,
        eval_scenario,
        seed,
    };
    let json = serde_json::to_vec(&spec)?;
    Ok(CellId { phase, eval_scenario, augmentation, hash: hashing::sha256_hex(&json) })
}

/// A unit of work owned by one worker: everything it needs is named by
/// plain data, and the model it builds never leaves the worker.
#[derive(Clone, Copy, Debug, PartialEq)]
enum PipelineKind {
    /// Train on standard, evaluate on the four robustness scenarios.
    TrainStandard,
    /// Evaluate the standard-trained model on one scenario, untouched.
    Epoch0 { scenario: ScenarioKind },
    /// Fine-tune on one process variant; record baseline and adapted MSE.
    FineTune { scenario: ScenarioKind },
    /// Fine-tune on augmented standard data; evaluate across scenarios.
    FineTuneAugmented { aug: Augmentation },
}

#[derive(Clone, Copy, Debug)]
struct Pipeline {
    arch: ArchKind,
    seed: u64,
    kind: PipelineKind,
}

impl Pipeline {
    /// The cells this pipeline produces, in emission order.
    fn cells(&self, cfg: &RunnerConfig) -> Result<Vec<CellId>> {
        let mut out = Vec::new();
        match self.kind {
            PipelineKind::TrainStandard => {
                for scen in EXP1_SCENARIOS {
                    out.push(cell_id(
                        cfg,
                        self.arch,
                        self.seed,
                        Phase::Trained,
                        scen,
                        Augmentation::None,
                        None,
                    )?);
                }
            }
            PipelineKind::Epoch0 { scenario } => {
                out.push(cell_id(
                    cfg,
                    self.arch,
                    self.seed,
                    Phase::Epoch0,
                    scenario,
                    Augmentation::None,
                    None,
                )?);
            }
            PipelineKind::FineTune { scenario } => {
                out.push(cell_id(
                    cfg,
                    self.arch,
                    self.seed,
                    Phase::Epoch0,
                    scenario,
                    Augmentation::None,
                    None,
                )?);
                out.push(cell_id(
                    cfg,
                    self.arch,
                    self.seed,
                    Phase::Epoch50,
                    scenario,
                    Augmentation::None,
                    Some(scenario),
                )?);
            }
            PipelineKind::FineTuneAugmented { aug } => {
                for scen in EXP3_SCENARIOS {
                    out.push(cell_id(
                        cfg,
                        self.arch,
                        self.seed,
                        Phase::Epoch50,
                        scen,
                        aug,
                        Some(ScenarioKind::Standard),
                    )?);
                }
            }
        }
        Ok(out)
    }
}

/// Load the standard-trained checkpoint for `(arch, seed)`, training and
/// saving it first when absent or stale. Returns the model.
fn ensure_trained(cfg: &RunnerConfig, arch: ArchKind, seed: u64, force: bool) -> Result<Model> {
    let path = cfg.checkpoint_path(arch, seed);
    let arch_config = cfg.profile.arch_config(arch);
    if !force && path.exists() {
        if let Ok(model) = load_model(&path) {
            if model.config == arch_config && model.seed == seed {
                return Ok(model);
            }
        }
        // A stale or foreign checkpoint is simply retrained over.
    }
    let (dataset, _) = scenario_dataset(ScenarioKind::Standard, cfg.profile.counts(), seed)?;
    let norm = Standardizer::fit(&dataset.train.samples)?;
    let mut model = build_model(&arch_config, norm, seed)?;
    let train_config = cfg.profile.train_config(seed);
    let started = Instant::now();
    let report = train(&mut model, &dataset, &train_config)?;
    fs::create_dir_all(cfg.checkpoints_dir())?;
    save_model(&model, &path)?;
    fs::create_dir_all(cfg.curves_dir())?;
    let stem = format!("train_{}_std_seed{}", arch.cli_name(), seed);
    report.write_csv(cfg.curves_dir().join(format!("{stem}.csv")))?;
    report.write_summary(cfg.curves_dir().join(format!("{stem}.toml")), &train_config)?;
    eprintln!(
        "[bench] trained {} seed {} in {:.0}s ({} epochs, best val {:.3e} @ {})",
        arch.cli_name(),
        seed,
        started.elapsed().as_secs_f64(),
        report.epochs.len(),
        report.best_val_mse,
        report.best_epoch,
    );
    Ok(model)
}

fn load_checkpoint(cfg: &RunnerConfig, arch: ArchKind, seed: u64) -> Result<Model> {
    let path = cfg.checkpoint_path(arch, seed);
    let model = load_model(&path)?;
    if model.config != cfg.profile.arch_config(arch) || model.seed != seed {
        return Err(BenchError::Invalid(format!(
            "checkpoint {} does not match the requested recipe",
            path.display()
        )));
    }
    Ok(model)
}

fn run_pipeline(cfg: &RunnerConfig, p: &Pipeline) -> Result<Vec<EvalResult>> {
    let cells = p.cells(cfg)?;
    let counts = cfg.profile.counts();
    match p.kind {
        PipelineKind::TrainStandard => {
            let model = load_checkpoint(cfg, p.arch, p.seed)?;
            let mut out = Vec::with_capacity(cells.len());
            for cell in cells {
                let (data, _) = scenario_dataset(cell.eval_scenario, counts, p.seed)?;
                out.push(evaluate(
                    &model,
                    &data.test.samples,
                    EvalLabel {
                        scenario: cell.eval_scenario,
                        augmentation: cell.augmentation,
                        phase: cell.phase,
                        seed: p.seed,
                        config_hash: cell.hash,
                    },
                )?);
            }
            Ok(out)
        }
        PipelineKind::Epoch0 { scenario } => {
            let model = load_checkpoint(cfg, p.arch, p.seed)?;
            let (data, _) = scenario_dataset(scenario, counts, p.seed)?;
            let cell = &cells[0];
            Ok(vec![evaluate(
                &model,
                &data.test.samples,
                EvalLabel {
                    scenario,
                    augmentation: cell.augmentation,
                    phase: cell.phase,
                    seed: p.seed,
                    config_hash: cell.hash.clone(),
                },
            )?])
        }
        PipelineKind::FineTune { scenario } => {
            let mut model = load_checkpoint(cfg, p.arch, p.seed)?;
            let (data, _) = scenario_dataset(scenario, counts, p.seed)?;
            let train_config = cfg.profile.train_config(p.seed);
            let started = Instant::now();
            let report = fine_tune(&mut model, &data, &train_config)?;
            let epoch0 = report.epoch0.clone().ok_or_else(|| {
                BenchError::Invalid("fine-tuning report is missing its baseline record".into())
            })?;
            if report.best_val_mse > epoch0.val_mse {
                return Err(BenchError::Invalid(format!(
                    "selection returned a model worse than its baseline ({} > {})",
                    report.best_val_mse, epoch0.val_mse
                )));
            }
            fs::create_dir_all(cfg.curves_dir())?;
            let stem = format!("finetune_{}_{}_seed{}", p.arch.cli_name(), scenario.cli_name(), p.seed);
            report.write_csv(cfg.curves_dir().join(format!("{stem}.csv")))?;
            report.write_summary(cfg.curves_dir().join(format!("{stem}.toml")), &train_config)?;
            eprintln!(
                "[bench] fine-tuned {} on {} seed {} in {:.0}s ({} epochs)",
                p.arch.cli_name(),
                scenario.cli_name(),
                p.seed,
                started.elapsed().as_secs_f64(),
                report.epochs.len(),
            );
            let baseline = EvalResult {
                schema_version: RESULTS_SCHEMA_VERSION,
                model: p.arch,
                scenario,
                augmentation: cells[0].augmentation,
                phase: cells[0].phase,
                test_mse: epoch0.test_mse,
                n_samples: data.test.len(),
                seed: p.seed,
                config_hash: cells[0].hash.clone(),
            };
            baseline.validate()?;
            let adapted = evaluate(
                &model,
                &data.test.samples,
                EvalLabel {
                    scenario,
                    augmentation: cells[1].augmentation,
                    phase: cells[1].phase,
                    seed: p.seed,
                    config_hash: cells[1].hash.clone(),
                },
            )?;
            Ok(vec![baseline, adapted])
        }
        PipelineKind::FineTuneAugmented { aug } => {
            let mut model = load_checkpoint(cfg, p.arch, p.seed)?;
            let (data, _) = augmented_standard_dataset(aug, counts, p.seed)?;
            let train_config = cfg.profile.train_config(p.seed);
            let started = Instant::now();
            let report = fine_tune(&mut model, &data, &train_config)?;
            fs::create_dir_all(cfg.curves_dir())?;
            let stem = format!("finetune_{}_std_{}_seed{}", p.arch.cli_name(), aug.name(), p.seed);
            report.write_csv(cfg.curves_dir().join(format!("{stem}.csv")))?;
            report.write_summary(cfg.curves_dir().join(format!("{stem}.toml")), &train_config)?;
            eprintln!(
                "[bench] fine-tuned {} with {} augmentation seed {} in {:.0}s ({} epochs)",
                p.arch.cli_name(),
                aug.name(),
                p.seed,
                started.elapsed().as_secs_f64(),
                report.epochs.len(),
            );
            let mut out = Vec::with_capacity(cells.len());
            for cell in cells {
                let (sd, _) = scenario_dataset(cell.eval_scenario, counts, p.seed)?;
                out.push(evaluate(
                    &model,
                    &sd.test.samples,
                    EvalLabel {
                        scenario: cell.eval_scenario,
                        augmentation: cell.augmentation,
                        phase: cell.phase,
                        seed: p.seed,
                        config_hash: cell.hash,
                    },
                )?);
            }
            Ok(out)
        }
    }
}

/// Run whichever of `pipelines` still have unrecorded cells (all of them
/// under `force`), then append the merged results in pipeline order.
fn run_pipelines(cfg: &RunnerConfig, pipelines: &[Pipeline], store: &mut ResultsStore) -> Result<()> {
    let mut todo = Vec::new();
    for p in pipelines {
        let cells = p.cells(cfg)?;
        if cfg.force || cells.iter().any(|c| !store.contains(&c.hash)) {
            todo.push(*p);
        }
    }
    if todo.is_empty() {
        return Ok(());
    }

    // Wave one: make sure every needed standard-trained checkpoint exists.
    // Each worker builds, trains, and drops its own model.
    let needed: BTreeSet<(ArchKind, u64)> = todo.iter().map(|p| (p.arch, p.seed)).collect();
    let needed: Vec<(ArchKind, u64)> = needed.into_iter().collect();
    needed
        .par_iter()
        .map(|&(arch, seed)| ensure_trained(cfg, arch, seed, cfg.force).map(drop))
        .collect::<Result<Vec<()>>>()?;

    // Wave two: the pipelines themselves, merged in deterministic order.
    let outputs: Vec<Vec<EvalResult>> =
        todo.par_iter().map(|p| run_pipeline(cfg, p)).collect::<Result<Vec<_>>>()?;
    for records in outputs {
        for record in records {
            if cfg.force || !store.contains(&record.config_hash) {
                store.append(record)?;
            }
        }
    }
    Ok(())
}

fn exp1_pipelines(cfg: &RunnerConfig) -> Vec<Pipeline> {
    let mut out = Vec::new();
    for &arch in &cfg.archs {
        for &seed in &cfg.seeds {
            out.push(Pipeline { arch, seed, kind: PipelineKind::TrainStandard });
        }
    }
    out
}

/// Train every architecture on the standard scenario and evaluate it on the
/// standard and perturbation test sets.
pub fn run_experiment1(cfg: &RunnerConfig) -> Result<ExperimentTable> {
    cfg.validate()?;
    let mut store = ResultsStore::open(cfg.results_path())?;
    run_pipelines(cfg, &exp1_pipelines(cfg), &mut store)?;
    report::record_run(cfg, 1)?;
    report::experiment_table(1, cfg, &store)
}

/// Fine-tune standard-trained models on each process variant, recording the
/// pre-fine-tuning baseline and the adapted test MSE.
pub fn run_experiment2(cfg: &RunnerConfig) -> Result<ExperimentTable> {
    cfg.validate()?;
    let mut store = ResultsStore::open(cfg.results_path())?;
    let mut pipelines = Vec::new();
    for &arch in &cfg.archs {
        for &seed in &cfg.seeds {
            for scenario in EXP2_SCENARIOS {
                pipelines.push(Pipeline { arch, seed, kind: PipelineKind::FineTune { scenario } });
            }
        }
    }
    run_pipelines(cfg, &pipelines, &mut store)?;
    report::record_run(cfg, 2)?;
    report::experiment_table(2, cfg, &store)
}

/// Fine-tune standard-trained models on augmented standard data and compare
/// against the un-fine-tuned column across standard, sensor-fault, and
/// merged-process test sets.
pub fn run_experiment3(cfg: &RunnerConfig) -> Result<ExperimentTable> {
    cfg.validate()?;
    let mut store = ResultsStore::open(cfg.results_path())?;
    let mut pipelines = Vec::new();
    for &arch in &cfg.archs {
        for &seed in &cfg.seeds {
            pipelines.push(Pipeline { arch, seed, kind: PipelineKind::TrainStandard });
            pipelines.push(Pipeline {
                arch,
                seed,
                kind: PipelineKind::Epoch0 { scenario: ScenarioKind::IndepMerge },
            });
            for aug in [Augmentation::Noise, Augmentation::Warp] {
                pipelines.push(Pipeline { arch, seed, kind: PipelineKind::FineTuneAugmented { aug } });
            }
        }
    }
    run_pipelines(cfg, &pipelines, &mut store)?;
    report::record_run(cfg, 3)?;
    report::experiment_table(3, cfg, &store)
}
