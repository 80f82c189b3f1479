//! Experiment orchestration: scenario dataset construction, deployment-mode
//! evaluation, the three experiment grids with an append-only results store,
//! forecast dumps for plotting, report rendering, and the acceptance suite.

pub mod acceptance;
pub mod data;
pub mod dump;
pub mod evaluate;
pub mod experiments;
pub mod profile;
pub mod report;
pub mod store;

use thiserror::Error;
use threetank_models::ModelError;
use threetank_sim::SimError;
use threetank_train::TrainError;

pub use data::{augmented_standard_dataset, scenario_dataset, scenario_sim_config, SOURCE_STEPS};
pub use dump::{dump_forecast, read_forecast_dump, ForecastDump};
pub use evaluate::{evaluate, persistence_mse, EvalLabel};
pub use experiments::{run_experiment1, run_experiment2, run_experiment3, RunnerConfig};
pub use profile::Profile;
pub use report::{render_csv, render_markdown, ExperimentTable, ReportMeta};
pub use store::{Augmentation, EvalResult, Phase, ResultsStore, RESULTS_SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("results store {path}: {message}")]
    Store { path: String, message: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("serialization: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("deserialization: {0}")]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;
