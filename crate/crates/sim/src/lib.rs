//! Three-tank process simulation, scenario construction, dataset extraction,
//! and data augmentation.
//!
//! Everything here is deterministic: a run is a pure function of its config
//! (including the seed), and random draws come from named, independent
//! [`rng`] streams so that, e.g., changing phase scheduling never perturbs
//! sensor noise.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod dynamics;
pub mod hashing;
pub mod rng;
pub mod run;
pub mod scenario;
pub mod state;

pub use config::{ProcessPhase, SimConfig};
pub use dataset::{
    Dataset, DatasetMeta, DatasetSplit, Sample, SplitCounts, CHANNELS, INPUT_STEPS, TARGET_STEPS,
    WINDOW_STEPS,
};
pub use run::{run_simulation, TimeSeries};
pub use scenario::{ScenarioKind, ScenarioParams, ScenarioSpec};
pub use state::{ControlInput, TankState};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("integration diverged at {context}")]
    IntegrationDiverged { context: String },
    #[error("series too short: interval '{interval}' has {len} steps, needs at least {needed}")]
    SeriesTooShort { interval: &'static str, len: usize, needed: usize },
    #[error("{0}")]
    EmptyRange(String),
    #[error("{file}:{line}: {msg}")]
    Malformed { file: String, line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml serialize: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("toml parse: {0}")]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;
