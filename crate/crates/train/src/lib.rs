//! Training harness for the three-tank forecasting models.
//!
//! The harness owns the optimization loop shared by every architecture:
//! minibatch Adam on the standardized forecast error, per-epoch validation,
//! learning-rate halving and early stopping driven by a pure
//! [`ProtocolState`], best-epoch checkpoint selection, fine-tuning with the
//! pre-training weights as a selection candidate, and a small grid search.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use threetank_autodiff::AdError;
use threetank_models::ModelError;

mod adam;
mod grid;
mod protocol;
mod trainer;

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON};
pub use grid::{
    grid_search, select_best, GridOutcome, GridPoint, GridPointResult, GRID_SEARCH_MAX_EPOCHS,
};
pub use protocol::{Decision, ProtocolState, IMPROVEMENT_TOLERANCE};
pub use trainer::{
    eval_batch_size, fine_tune, forecast_mse_original, forecast_original, train, validation_mse,
    Epoch0Record, EpochRecord, TrainReport, TrainSummary,
};

/// Fine-tuning runs are capped at this many epochs.
pub const FINE_TUNE_MAX_EPOCHS: usize = 50;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite gradient for parameter '{param}' at optimizer step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error(
        "training diverged: non-finite loss at epoch {epoch}; completed epochs:\n{}",
        trainer::records_csv(.trace)
    )]
    Diverged { epoch: usize, trace: Vec<EpochRecord> },
    #[error("empty hyperparameter grid")]
    EmptyGrid,
    #[error("grid point {index} is a {got} config, expected {expected}")]
    GridKindMismatch {
        index: usize,
        got: String,
        expected: String,
    },
    #[error("all {0} grid points failed to train")]
    AllGridPointsFailed(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("toml serialize: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Hyperparameters of one training run.
///
/// The `fine_tune` flag caps the epoch budget at [`FINE_TUNE_MAX_EPOCHS`]
/// regardless of `max_epochs`; an explicitly smaller `max_epochs` (down to 0)
/// is honored, which is how a no-op fine-tune that only records the
/// pre-training metrics is expressed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_halve_patience: usize,
    pub seed: u64,
    pub fine_tune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 1000,
            early_stop_patience: 50,
            lr_halve_patience: 25,
            seed: 0,
            fine_tune: false,
        }
    }
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Config for a fine-tuning run at the standard epoch cap.
    pub fn fine_tuning(seed: u64) -> Self {
        Self {
            seed,
            fine_tune: true,
            max_epochs: FINE_TUNE_MAX_EPOCHS,
            ..Self::default()
        }
    }

    /// Epoch budget actually applied by the loop.
    pub fn effective_max_epochs(&self) -> usize {
        if self.fine_tune {
            self.max_epochs.min(FINE_TUNE_MAX_EPOCHS)
        } else {
            self.max_epochs
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(TrainError::InvalidConfig(
                "early_stop_patience must be >= 1".into(),
            ));
        }
        if self.lr_halve_patience == 0 {
            return Err(TrainError::InvalidConfig(
                "lr_halve_patience must be >= 1".into(),
            ));
        }
        if !self.fine_tune && self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig(
                "max_epochs must be >= 1 for a training run".into(),
            ));
        }
        Ok(())
    }
}
