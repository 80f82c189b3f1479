//! Report generation: a pure function of the stored results. Tables are
//! assembled by looking up each cell's reproduction hash; rendering never
//! trains or evaluates anything.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use threetank_models::{build_model, ArchKind, Standardizer};

use crate::experiments::{cell_id, RunnerConfig, EXP1_SCENARIOS, EXP2_SCENARIOS, EXP3_SCENARIOS};
use crate::profile::Profile;
use crate::store::{Augmentation, Phase, ResultsStore};
use crate::{BenchError, Result};
use threetank_sim::ScenarioKind;

/// Which experiments have been run into an output directory, and with what
/// selection; re-rendering reads this instead of guessing from the records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub runs: Vec<RunEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub experiment: u8,
    pub profile: Profile,
    pub seeds: Vec<u64>,
    pub archs: Vec<ArchKind>,
}

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<RunManifest> {
        let text = fs::read_to_string(path.as_ref())?;
        let manifest: RunManifest = toml::from_str(&text)?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(BenchError::Invalid(format!(
                "run manifest schema {} (this build reads {})",
                manifest.schema_version, MANIFEST_SCHEMA_VERSION
            )));
        }
        Ok(manifest)
    }
}

/// Record that `experiment` was run with `cfg`'s selection, replacing any
/// previous entry for the same experiment.
pub(crate) fn record_run(cfg: &RunnerConfig, experiment: u8) -> Result<()> {
    let path = cfg.manifest_path();
    let mut manifest = if path.exists() {
        RunManifest::load(&path).unwrap_or(RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            runs: Vec::new(),
        })
    } else {
        RunManifest { schema_version: MANIFEST_SCHEMA_VERSION, runs: Vec::new() }
    };
    manifest.runs.retain(|r| r.experiment != experiment);
    manifest.runs.push(RunEntry {
        experiment,
        profile: cfg.profile,
        seeds: cfg.seeds.clone(),
        archs: cfg.archs.clone(),
    });
    manifest.runs.sort_by_key(|r| r.experiment);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, toml::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// One rendered grid: model rows by scenario/phase/augmentation columns,
/// each cell the median test MSE over the run's seeds (None where the store
/// has no record yet).
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentTable {
    pub experiment: u8,
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub model: ArchKind,
    pub cells: Vec<Option<f64>>,
}

/// A column's identity: which cell hash to look up for each (model, seed).
struct ColumnSpec {
    label: String,
    phase: Phase,
    eval_scenario: ScenarioKind,
    augmentation: Augmentation,
    fine_tune_scenario: Option<ScenarioKind>,
}

fn experiment_columns(experiment: u8) -> Result<Vec<ColumnSpec>> {
    let mut cols = Vec::new();
    match experiment {
        1 => {
            for scen in EXP1_SCENARIOS {
                cols.push(ColumnSpec {
                    label: scen.label().to_string(),
                    phase: Phase::Trained,
                    eval_scenario: scen,
                    augmentation: Augmentation::None,
                    fine_tune_scenario: None,
                });
            }
        }
        2 => {
            for scen in EXP2_SCENARIOS {
                cols.push(ColumnSpec {
                    label: format!("{} (epoch 0)", scen.label()),
                    phase: Phase::Epoch0,
                    eval_scenario: scen,
                    augmentation: Augmentation::None,
                    fine_tune_scenario: None,
                });
                cols.push(ColumnSpec {
                    label: format!("{} (epoch 50)", scen.label()),
                    phase: Phase::Epoch50,
                    eval_scenario: scen,
                    augmentation: Augmentation::None,
                    fine_tune_scenario: Some(scen),
                });
            }
        }
        3 => {
            for scen in EXP3_SCENARIOS {
                for aug in Augmentation::ALL {
                    let (phase, fine_tune_scenario) = match aug {
                        // The un-augmented column is the model before any
                        // fine-tuning: fully trained on standard, which for
                        // the merged-process scenario is its epoch-0
                        // baseline.
                        Augmentation::None => {
                            if scen == ScenarioKind::IndepMerge {
                                (Phase::Epoch0, None)
                            } else {
                                (Phase::Trained, None)
                            }
                        }
                        _ => (Phase::Epoch50, Some(ScenarioKind::Standard)),
                    };
                    cols.push(ColumnSpec {
                        label: format!("{} ({aug})", scen.label()),
                        phase,
                        eval_scenario: scen,
                        augmentation: aug,
                        fine_tune_scenario,
                    });
                }
            }
        }
        n => return Err(BenchError::Invalid(format!("unknown experiment {n} (expected 1, 2, or 3)"))),
    }
    Ok(cols)
}

/// Median with the usual convention: middle element for odd counts, mean of
/// the two middle elements for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    Some(if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 })
}

/// Assemble an experiment grid from the store: per cell, look up every
/// seed's record by its reproduction hash and take the median.
pub fn experiment_table(
    experiment: u8,
    cfg: &RunnerConfig,
    store: &ResultsStore,
) -> Result<ExperimentTable> {
    let columns = experiment_columns(experiment)?;
    let mut rows = Vec::with_capacity(cfg.archs.len());
    for &arch in &cfg.archs {
        let mut cells = Vec::with_capacity(columns.len());
        for col in &columns {
            let mut values = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                let cell = cell_id(
                    cfg,
                    arch,
                    seed,
                    col.phase,
                    col.eval_scenario,
                    col.augmentation,
                    col.fine_tune_scenario,
                )?;
                if let Some(rec) = store.get(&cell.hash) {
                    values.push(rec.test_mse);
                }
            }
            // A cell is reported only when every requested seed is present;
            // a partial median would silently change meaning.
            cells.push(if values.len() == cfg.seeds.len() { median(&values) } else { None });
        }
        rows.push(TableRow { model: arch, cells });
    }
    let title = match experiment {
        1 => "Experiment 1 — robustness to perturbations (test MSE)",
        2 => "Experiment 2 — fine-tuning on process variants (test MSE)",
        _ => "Experiment 3 — fine-tuning with augmented data (test MSE)",
    };
    Ok(ExperimentTable {
        experiment,
        title: title.to_string(),
        columns: columns.into_iter().map(|c| c.label).collect(),
        rows,
    })
}

/// Everything the renderer says about provenance.
#[derive(Clone, Debug)]
pub struct ReportMeta {
    pub profile: Profile,
    pub seeds: Vec<u64>,
    pub results_file: String,
}

/// Per-column extrema: index of the best (lowest) and worst (highest)
/// filled cell, or None when the column has no comparable pair.
fn column_extrema(rows: &[TableRow], col: usize) -> (Option<usize>, Option<usize>) {
    let mut best: Option<(usize, f64)> = None;
    let mut worst: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        if let Some(v) = row.cells[col] {
            if best.map_or(true, |(_, b)| v < b) {
                best = Some((i, v));
            }
            if worst.map_or(true, |(_, w)| v > w) {
                worst = Some((i, v));
            }
        }
    }
    match (best, worst) {
        (Some((b, _)), Some((w, _))) if b != w => (Some(b), Some(w)),
        (Some((b, _)), _) => (Some(b), None),
        _ => (None, None),
    }
}

fn seeds_list(seeds: &[u64]) -> String {
    seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(", ")
}

/// Render the tables as one Markdown document: best cell per column in
/// bold, worst underlined, with a provenance header.
pub fn render_markdown(tables: &[ExperimentTable], meta: &ReportMeta) -> String {
    let mut out = String::new();
    out.push_str("# Three-tank forecasting benchmark report\n\n");
    out.push_str(&format!(
        "Profile: {}. Seeds: {}. Each cell is the **median** test MSE in original \
         units over the listed seeds; individual runs vary around these medians, so \
         single-run tables are only directionally comparable. Per-seed records with \
         their reproduction hashes live in `{}`.\n\n",
        meta.profile,
        seeds_list(&meta.seeds),
        meta.results_file,
    ));
    out.push_str("Markers: **best** per column, <u>worst</u> per column.\n");
    for table in tables {
        out.push_str(&format!("\n## {}\n\n", table.title));
        out.push_str("| Model |");
        for col in &table.columns {
            out.push_str(&format!(" {col} |"));
        }
        out.push('\n');
        out.push_str("|---|");
        for _ in &table.columns {
            out.push_str("---|");
        }
        out.push('\n');
        let extrema: Vec<_> = (0..table.columns.len())
            .map(|c| column_extrema(&table.rows, c))
            .collect();
        for (i, row) in table.rows.iter().enumerate() {
            out.push_str(&format!("| {} |", row.model.label()));
            for (c, cell) in row.cells.iter().enumerate() {
                let text = match cell {
                    Some(v) => {
                        let s = format!("{v:.4e}");
                        let (best, worst) = extrema[c];
                        if best == Some(i) {
                            format!("**{s}**")
                        } else if worst == Some(i) {
                            format!("<u>{s}</u>")
                        } else {
                            s
                        }
                    }
                    None => "–".to_string(),
                };
                out.push_str(&format!(" {text} |"));
            }
            out.push('\n');
        }
    }
    out.push_str("\n## Parameter counts\n\n| Model | Parameters |\n|---|---|\n");
    for (kind, count) in parameter_counts(meta.profile) {
        out.push_str(&format!("| {} | {} |\n", kind.label(), count));
    }
    out.push_str(
        "\nPer-epoch training and fine-tuning curves are written as CSV next to the \
         results file under `curves/`.\n",
    );
    out
}

/// Render one table as CSV: full-precision cells, no markers, empty string
/// for missing cells.
pub fn render_csv(table: &ExperimentTable) -> String {
    let mut out = String::from("model");
    for col in &table.columns {
        out.push(',');
        // Commas inside column labels would shift the grid.
        out.push_str(&col.replace(',', ";"));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(row.model.cli_name());
        for cell in &row.cells {
            out.push(',');
            if let Some(v) = cell {
                out.push_str(&format!("{v:e}"));
            }
        }
        out.push('\n');
    }
    out
}

/// Parameter counts per architecture at this profile's sizes. Building the
/// (untrained) models is deterministic and cheap; no training is involved.
pub fn parameter_counts(profile: Profile) -> Vec<(ArchKind, usize)> {
    ArchKind::ALL
        .iter()
        .map(|&kind| {
            let model = build_model(&profile.arch_config(kind), Standardizer::identity(), 0)
                .expect("profile architecture configs are validated");
            (kind, model.parameter_count())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_follows_the_usual_convention() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[2.0]), Some(2.0));
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn markers_pick_the_best_and_worst_per_column() {
        let rows = vec![
            TableRow { model: ArchKind::Mlp, cells: vec![Some(2.0), Some(1.0)] },
            TableRow { model: ArchKind::Gru, cells: vec![Some(1.0), None] },
            TableRow { model: ArchKind::Tcn, cells: vec![Some(3.0), Some(5.0)] },
        ];
        assert_eq!(column_extrema(&rows, 0), (Some(1), Some(2)));
        assert_eq!(column_extrema(&rows, 1), (Some(0), Some(2)));
        let single = vec![TableRow { model: ArchKind::Mlp, cells: vec![Some(2.0)] }];
        assert_eq!(column_extrema(&single, 0), (Some(0), None));
    }

    #[test]
    fn markdown_and_csv_render_the_grid_shape() {
        let table = ExperimentTable {
            experiment: 1,
            title: "Experiment 1 — robustness to perturbations (test MSE)".into(),
            columns: vec!["standard".into(), "sensor faults".into()],
            rows: vec![
                TableRow { model: ArchKind::Mlp, cells: vec![Some(0.5), Some(1.0)] },
                TableRow { model: ArchKind::Gru, cells: vec![Some(0.25), None] },
            ],
        };
        let meta = ReportMeta {
            profile: Profile::Desk,
            seeds: vec![1, 2, 3],
            results_file: "results.jsonl".into(),
        };
        let md = render_markdown(&[table.clone()], &meta);
        assert!(md.contains("| Model | standard | sensor faults |"), "{md}");
        assert!(md.contains("**2.5000e-1**"), "best not bolded: {md}");
        assert!(md.contains("<u>5.0000e-1</u>"), "worst not underlined: {md}");
        assert!(md.contains("median"), "header must state the median convention");
        assert!(md.contains("–"), "missing cells must render as dashes");

        let csv = render_csv(&table);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "model,standard,sensor faults");
        assert_eq!(lines.next().unwrap(), "mlp,5e-1,1e0");
        assert_eq!(lines.next().unwrap(), "gru,2.5e-1,");
    }

    #[test]
    fn experiment_grids_have_the_documented_shapes() {
        assert_eq!(experiment_columns(1).unwrap().len(), 4);
        assert_eq!(experiment_columns(2).unwrap().len(), 8);
        assert_eq!(experiment_columns(3).unwrap().len(), 9);
        assert!(experiment_columns(4).is_err());
    }

    #[test]
    fn parameter_counts_are_positive_and_profile_dependent() {
        let desk = parameter_counts(Profile::Desk);
        let paper = parameter_counts(Profile::Paper);
        assert_eq!(desk.len(), 7);
        for ((kd, cd), (kp, cp)) in desk.iter().zip(&paper) {
            assert_eq!(kd, kp);
            assert!(*cd > 0);
            assert!(cd < cp, "{kd:?}: desk {cd} should be smaller than full {cp}");
        }
    }
}
