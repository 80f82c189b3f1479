//! `threetank`: simulate the three-tank process, build datasets, train and
//! evaluate forecasters, reproduce the experiment grids, and run the
//! self-checks. Single-threaded orchestration; the experiment runner owns
//! any parallelism.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use threetank_bench::report::{experiment_table, RunManifest};
use threetank_bench::{
    acceptance, dump_forecast, run_experiment1, run_experiment2, run_experiment3,
    scenario_dataset, scenario_sim_config, Augmentation, ExperimentTable, Profile, ReportMeta,
    ResultsStore, RunnerConfig,
};
use threetank_models::{
    build_model, load_model, save_model, ArchConfig, ArchKind, Model, Standardizer,
};
use threetank_sim::augment::{augment_sample, AugmentParams};
use threetank_sim::dataset::{export_csv, import_csv};
use threetank_sim::hashing::config_hash;
use threetank_sim::rng::{stream_rng, AUGMENT_STREAM};
use threetank_sim::{run_simulation, Dataset, ScenarioKind};
use threetank_train::{
    eval_batch_size, fine_tune, forecast_mse_original, train, TrainConfig, FINE_TUNE_MAX_EPOCHS,
};

#[derive(Parser)]
#[command(
    name = "threetank",
    version,
    about = "Three-tank process simulation and forecasting benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write the series as CSV.
    Simulate {
        /// Scenario: std or s1..s7.
        #[arg(long, default_value = "std")]
        scenario: String,
        /// Observation steps to simulate.
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Dataset tools.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train a model from scratch on a stored dataset.
    Train {
        /// Architecture: mlp, gru, gru_ar, tcn, tcn_fae, transformer, transformer_ce.
        #[arg(long)]
        model: String,
        /// Dataset directory (from `dataset generate`).
        #[arg(long)]
        data: PathBuf,
        /// Optional TOML file with [train] and [model] overrides.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
        /// Architecture size preset the overrides start from.
        #[arg(long, default_value = "paper")]
        profile: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Fine-tune a checkpoint on a scenario.
    Finetune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenario: String,
        /// Training-set augmentation: none, noise, or warp.
        #[arg(long, default_value = "none")]
        augment: String,
        /// Strength override for the chosen augmentation (noise sigma or
        /// warp jitter).
        #[arg(long)]
        aug_strength: Option<f64>,
        /// Split sizes to fine-tune on.
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a stored dataset's test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also dump the first test sample's forecast as CSV.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Model tools.
    #[command(subcommand)]
    Model(ModelCommand),
    /// Run one experiment grid and render its table.
    Experiment {
        /// Which grid: 1, 2, or 3.
        number: u8,
        #[arg(long, default_value = "desk")]
        profile: String,
        /// Comma-separated seeds (default: the profile's seeds).
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated architecture subset (default: all).
        #[arg(long)]
        archs: Option<String>,
        /// Output directory for results, checkpoints, curves, and reports.
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Recompute cells even when the store already has them.
        #[arg(long)]
        force: bool,
    },
    /// Render reports from a results directory.
    Report {
        /// Directory written by `experiment` (holds results.jsonl and run.toml).
        #[arg(long)]
        results: PathBuf,
        /// md or csv.
        #[arg(long, default_value = "md")]
        format: String,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the self-checks; exits 1 if any fail.
    Check {
        /// Also run the desk-scale experiment checks (trains models; the
        /// first run takes tens of minutes, later runs re-read the cache).
        #[arg(long)]
        full: bool,
        /// Cache directory for the experiment checks.
        #[arg(long, default_value = "acceptance-cache")]
        cache: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Simulate a scenario and write train/val/test CSV splits.
    Generate {
        #[arg(long, default_value = "std")]
        scenario: String,
        /// Split sizes: desk or paper.
        #[arg(long, default_value = "desk")]
        profile: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Print a checkpoint's architecture, configuration, and size.
    Describe {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate { scenario, steps, seed, out } => simulate(&scenario, steps, seed, &out),
        Command::Dataset(DatasetCommand::Generate { scenario, profile, seed, out }) => {
            dataset_generate(&scenario, &profile, seed, &out)
        }
        Command::Train { model, data, config, out, profile, seed, max_epochs, learning_rate } => {
            train_command(&model, &data, config.as_deref(), &out, &profile, seed, max_epochs, learning_rate)
        }
        Command::Finetune {
            ckpt,
            scenario,
            augment,
            aug_strength,
            profile,
            seed,
            max_epochs,
            out,
        } => finetune_command(
            &ckpt,
            &scenario,
            &augment,
            aug_strength,
            &profile,
            seed,
            max_epochs,
            &out,
        ),
        Command::Eval { ckpt, data, dump } => eval_command(&ckpt, &data, dump.as_deref()),
        Command::Model(ModelCommand::Describe { ckpt }) => describe_command(&ckpt),
        Command::Experiment { number, profile, seeds, archs, out, force } => {
            experiment_command(number, &profile, seeds.as_deref(), archs.as_deref(), &out, force)
        }
        Command::Report { results, format, out } => {
            report_command(&results, &format, out.as_deref())
        }
        Command::Check { full, cache } => check_command(full, &cache),
    }
}

fn parse_scenario(s: &str) -> Result<ScenarioKind> {
    s.parse::<ScenarioKind>().map_err(|e| anyhow::anyhow!("{e}"))
}

fn parse_profile(s: &str) -> Result<Profile> {
    s.parse::<Profile>().map_err(|e| anyhow::anyhow!("{e}"))
}

fn parse_arch(s: &str) -> Result<ArchKind> {
    s.parse::<ArchKind>().map_err(|e| anyhow::anyhow!("{e}"))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| p.trim().parse::<u64>().with_context(|| format!("bad seed '{p}'")))
        .collect()
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

fn simulate(scenario: &str, steps: usize, seed: u64, out: &Path) -> Result<ExitCode> {
    let kind = parse_scenario(scenario)?;
    let cfg = scenario_sim_config(kind, seed)?;
    let hash = config_hash(&cfg)?;
    println!(
        "# effective configuration\nscenario = \"{}\"\nsteps = {steps}\nseed = {seed}\nconfig_hash = \"{hash}\"",
        kind.cli_name()
    );
    let series = run_simulation(&cfg, steps)?;
    series.export_csv(out, &hash)?;
    println!("wrote {} ({} steps)", out.display(), series.len());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// dataset generate
// ---------------------------------------------------------------------------

fn dataset_generate(scenario: &str, profile: &str, seed: u64, out: &Path) -> Result<ExitCode> {
    let kind = parse_scenario(scenario)?;
    let profile = parse_profile(profile)?;
    let counts = profile.counts();
    let (dataset, meta) = scenario_dataset(kind, counts, seed)?;
    println!(
        "# effective configuration\nscenario = \"{}\"\nprofile = \"{profile}\"\nseed = {seed}\n\
         train = {}\nval = {}\ntest = {}\nconfig_hash = \"{}\"",
        kind.cli_name(),
        counts.train,
        counts.val,
        counts.test,
        meta.config_hash
    );
    export_csv(out, &dataset, &meta)?;
    println!("wrote {}/{{train,val,test}}.csv and meta.toml", out.display());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Optional TOML override file: partial `[train]` and `[model]` tables.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    train: Option<toml::Table>,
    model: Option<toml::Table>,
}

/// Overlay `patch`'s keys onto a TOML rendering of `base` and parse the
/// result back. Flags later override individual fields again.
fn merge_into<T: serde::Serialize + serde::de::DeserializeOwned>(
    base: &T,
    patch: Option<&toml::Table>,
) -> Result<T> {
    let mut value = toml::Table::try_from(base)?;
    if let Some(patch) = patch {
        for (k, v) in patch {
            value.insert(k.clone(), v.clone());
        }
    }
    Ok(value.try_into()?)
}

#[allow(clippy::too_many_arguments)]
fn train_command(
    model: &str,
    data: &Path,
    config: Option<&Path>,
    out: &Path,
    profile: &str,
    seed: Option<u64>,
    max_epochs: Option<usize>,
    learning_rate: Option<f64>,
) -> Result<ExitCode> {
    let kind = parse_arch(model)?;
    let profile = parse_profile(profile)?;
    let file: FileConfig = match config {
        Some(path) => toml::from_str(&std::fs::read_to_string(path)?)
            .with_context(|| format!("parsing {}", path.display()))?,
        None => FileConfig::default(),
    };

    // Precedence: flag > config file > profile default.
    let arch_config: ArchConfig = merge_into(&profile.arch_config(kind), file.model.as_ref())?;
    if arch_config.kind() != kind {
        bail!(
            "--model {} but the [model] section configures {}",
            kind.cli_name(),
            arch_config.kind().cli_name()
        );
    }
    let mut train_config: TrainConfig =
        merge_into(&profile.train_config(0), file.train.as_ref())?;
    if let Some(seed) = seed {
        train_config.seed = seed;
    }
    if let Some(n) = max_epochs {
        train_config.max_epochs = n;
    }
    if let Some(lr) = learning_rate {
        train_config.learning_rate = lr;
    }

    let (dataset, meta) = import_csv(data)?;
    println!("# effective configuration");
    print!("{}", toml::to_string_pretty(&EffectiveTrain {
        model: &arch_config,
        train: &train_config,
        dataset_config_hash: &meta.config_hash,
    })?);

    let norm = Standardizer::fit(&dataset.train.samples)?;
    let mut model = build_model(&arch_config, norm, train_config.seed)?;
    let report = train(&mut model, &dataset, &train_config)?;
    save_model(&model, out)?;

    let curve = out.with_extension("curve.csv");
    report.write_csv(&curve)?;
    println!(
        "trained {} ({} parameters): best epoch {} of {}, val MSE {:.6e}, {:.1}s",
        kind.cli_name(),
        model.parameter_count(),
        report.best_epoch,
        report.epochs.len(),
        report.best_val_mse,
        report.wall_time_secs
    );
    println!("wrote {} and {}", out.display(), curve.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize)]
struct EffectiveTrain<'a> {
    model: &'a ArchConfig,
    train: &'a TrainConfig,
    dataset_config_hash: &'a str,
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn finetune_command(
    ckpt: &Path,
    scenario: &str,
    augment: &str,
    aug_strength: Option<f64>,
    profile: &str,
    seed: Option<u64>,
    max_epochs: Option<usize>,
    out: &Path,
) -> Result<ExitCode> {
    let kind = parse_scenario(scenario)?;
    let augment: Augmentation = augment.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
    let profile = parse_profile(profile)?;
    let mut model = load_model(ckpt)?;

    let mut cfg = TrainConfig::fine_tuning(seed.unwrap_or(model.seed));
    if let Some(n) = max_epochs {
        if n > FINE_TUNE_MAX_EPOCHS {
            bail!("fine-tuning is capped at {FINE_TUNE_MAX_EPOCHS} epochs, got {n}");
        }
        cfg.max_epochs = n;
    }

    let (mut dataset, meta) = scenario_dataset(kind, profile.counts(), cfg.seed)?;
    let params = augment_params(augment, aug_strength)?;
    if let Some(params) = params {
        augment_train_split(&mut dataset, &params, cfg.seed)?;
    }

    println!("# effective configuration");
    print!("{}", toml::to_string_pretty(&EffectiveFinetune {
        scenario: kind.cli_name(),
        augment: augment.name(),
        augment_params: params,
        train: &cfg,
        dataset_config_hash: &meta.config_hash,
    })?);

    let report = fine_tune(&mut model, &dataset, &cfg)?;
    save_model(&model, out)?;
    let epoch0 = report.epoch0.as_ref().context("fine-tune report lost its baseline")?;
    println!(
        "fine-tuned on {}: epoch-0 test MSE {:.6e} -> best epoch {} test path val {:.6e}, {:.1}s",
        kind.cli_name(),
        epoch0.test_mse,
        report.best_epoch,
        report.best_val_mse,
        report.wall_time_secs
    );
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(serde::Serialize)]
struct EffectiveFinetune<'a> {
    scenario: &'a str,
    augment: &'a str,
    augment_params: Option<AugmentParams>,
    train: &'a TrainConfig,
    dataset_config_hash: &'a str,
}

/// The canonical parameters for one augmentation choice, with an optional
/// strength override for its active knob.
fn augment_params(augment: Augmentation, strength: Option<f64>) -> Result<Option<AugmentParams>> {
    let defaults = AugmentParams::default();
    Ok(match augment {
        Augmentation::None => {
            if strength.is_some() {
                bail!("--aug-strength requires --augment noise or warp");
            }
            None
        }
        Augmentation::Noise => Some(AugmentParams {
            noise_sigma: strength.unwrap_or(defaults.noise_sigma),
            time_warp_jitter: 0.0,
        }),
        Augmentation::Warp => Some(AugmentParams {
            noise_sigma: 0.0,
            time_warp_jitter: strength.unwrap_or(defaults.time_warp_jitter),
        }),
    })
}

/// Augment every training sample in place, one deterministic stream for the
/// whole split; validation and test stay untouched.
fn augment_train_split(dataset: &mut Dataset, params: &AugmentParams, seed: u64) -> Result<()> {
    let mut rng = stream_rng(seed, AUGMENT_STREAM);
    let mut augmented = Vec::with_capacity(dataset.train.samples.len());
    for sample in &dataset.train.samples {
        augmented.push(augment_sample(sample, params, &mut rng)?);
    }
    dataset.train.samples = augmented;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn eval_command(ckpt: &Path, data: &Path, dump: Option<&Path>) -> Result<ExitCode> {
    let model = load_model(ckpt)?;
    let (dataset, meta) = import_csv(data)?;
    let mse = forecast_mse_original(
        &model,
        &dataset.test.samples,
        eval_batch_size(model.kind()),
    )?;
    println!(
        "model = \"{}\"\ndataset = \"{}\"\ndataset_config_hash = \"{}\"\nn_samples = {}\ntest_mse = {:e}",
        model.kind().cli_name(),
        meta.scenario,
        meta.config_hash,
        dataset.test.len(),
        mse
    );
    if let Some(path) = dump {
        dump_forecast(&model, &dataset.test.samples[0], path, &meta.config_hash)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// model describe
// ---------------------------------------------------------------------------

fn describe_command(ckpt: &Path) -> Result<ExitCode> {
    let model: Model = load_model(ckpt)?;
    println!("kind = \"{}\"", model.kind().cli_name());
    println!("parameters = {}", model.parameter_count());
    println!("seed = {}", model.seed);
    print!("{}", toml::to_string_pretty(&model.config)?);
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

fn experiment_command(
    number: u8,
    profile: &str,
    seeds: Option<&str>,
    archs: Option<&str>,
    out: &Path,
    force: bool,
) -> Result<ExitCode> {
    let profile = parse_profile(profile)?;
    let mut cfg = RunnerConfig::new(profile, out.to_path_buf());
    cfg.force = force;
    if let Some(seeds) = seeds {
        cfg.seeds = parse_seeds(seeds)?;
    }
    if let Some(archs) = archs {
        cfg.archs = archs.split(',').map(|a| parse_arch(a.trim())).collect::<Result<_>>()?;
    }
    println!(
        "# effective configuration\nexperiment = {number}\nprofile = \"{profile}\"\nseeds = {:?}\narchs = {:?}\nout = \"{}\"\nforce = {force}",
        cfg.seeds,
        cfg.archs.iter().map(|a| a.cli_name()).collect::<Vec<_>>(),
        out.display()
    );

    let table = match number {
        1 => run_experiment1(&cfg)?,
        2 => run_experiment2(&cfg)?,
        3 => run_experiment3(&cfg)?,
        n => bail!("unknown experiment {n} (expected 1, 2, or 3)"),
    };

    let meta = ReportMeta {
        profile,
        seeds: cfg.seeds.clone(),
        results_file: cfg.results_path().display().to_string(),
    };
    let md = threetank_bench::render_markdown(std::slice::from_ref(&table), &meta);
    let md_path = out.join(format!("experiment{number}.md"));
    let csv_path = out.join(format!("experiment{number}.csv"));
    std::fs::write(&md_path, &md)?;
    std::fs::write(&csv_path, threetank_bench::render_csv(&table))?;
    println!("\n{md}");
    println!("wrote {} and {}", md_path.display(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn report_command(results: &Path, format: &str, out: Option<&Path>) -> Result<ExitCode> {
    let manifest_path = results.join("run.toml");
    let manifest = RunManifest::load(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    if manifest.runs.is_empty() {
        bail!("no recorded runs in {}", manifest_path.display());
    }
    let store = ResultsStore::open(results.join("results.jsonl"))?;

    let mut tables: Vec<ExperimentTable> = Vec::new();
    let mut meta_profile = None;
    let mut meta_seeds = Vec::new();
    for entry in &manifest.runs {
        let mut cfg = RunnerConfig::new(entry.profile, results.to_path_buf());
        cfg.seeds = entry.seeds.clone();
        cfg.archs = entry.archs.clone();
        tables.push(experiment_table(entry.experiment, &cfg, &store)?);
        meta_profile.get_or_insert(entry.profile);
        if entry.seeds.len() > meta_seeds.len() {
            meta_seeds = entry.seeds.clone();
        }
    }

    let rendered = match format {
        "md" => {
            let meta = ReportMeta {
                profile: meta_profile.unwrap_or(Profile::Desk),
                seeds: meta_seeds,
                results_file: results.join("results.jsonl").display().to_string(),
            };
            threetank_bench::render_markdown(&tables, &meta)
        }
        "csv" => {
            let mut parts = Vec::new();
            for table in &tables {
                parts.push(format!("# experiment {}\n{}", table.experiment, threetank_bench::render_csv(table)));
            }
            parts.join("\n")
        }
        other => bail!("unknown format '{other}' (expected md or csv)"),
    };

    match out {
        Some(path) => {
            std::fs::write(path, &rendered)?;
            println!("wrote {}", path.display());
        }
        None => print!("{rendered}"),
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

fn check_command(full: bool, cache: &Path) -> Result<ExitCode> {
    let use_color = std::env::var_os("NO_COLOR").is_none();
    let reports = if full { acceptance::run_all(cache) } else { acceptance::fast_checks() };
    let mut all_passed = true;
    for report in &reports {
        let line = report.line();
        if use_color {
            let colored = if report.passed {
                line.replacen("PASS", "\x1b[32mPASS\x1b[0m", 1)
            } else {
                line.replacen("FAIL", "\x1b[31mFAIL\x1b[0m", 1)
            };
            println!("{colored}");
        } else {
            println!("{line}");
        }
        all_passed &= report.passed;
    }
    if !full {
        println!("(desk-scale experiment checks skipped; pass --full to run them)");
    }
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
