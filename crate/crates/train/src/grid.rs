//! Hyperparameter grid search with a reduced epoch budget.

use serde::{Deserialize, Serialize};
use threetank_models::{build_model, ArchConfig, ArchKind, Standardizer};
use threetank_sim::Dataset;

use crate::trainer::train;
use crate::{Result, TrainConfig, TrainError};

/// Epoch budget per grid point. A caller-supplied smaller `max_epochs` is
/// honored; the budget is a cap, not a floor.
pub const GRID_SEARCH_MAX_EPOCHS: usize = 100;

/// One candidate: an architecture config plus the learning rate to train it
/// with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub arch: ArchConfig,
    pub learning_rate: f64,
}

#[derive(Clone, Debug)]
pub struct GridPointResult {
    pub point: GridPoint,
    /// Best validation MSE of the budgeted run; +inf when the run failed.
    pub best_val_mse: f64,
    pub parameter_count: usize,
    /// Present when the point's training run aborted (divergence or a
    /// non-finite gradient); such points lose to any finished one.
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct GridOutcome {
    pub best: GridPoint,
    pub best_index: usize,
    pub results: Vec<GridPointResult>,
}

/// Index of the winning `(best_val_mse, parameter_count)` pair: lowest
/// validation MSE wins, exact ties prefer fewer parameters, remaining ties
/// the earliest entry. Non-finite MSEs order after every finite one.
pub fn select_best(candidates: &[(f64, usize)]) -> usize {
    assert!(!candidates.is_empty(), "select_best needs at least one candidate");
    candidates
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .map(|(i, _)| i)
        .unwrap()
}

/// Train every grid point on `data` with the budget cap and return the
/// winner. All points must configure the architecture under search.
pub fn grid_search(
    kind: ArchKind,
    grid: &[GridPoint],
    data: &Dataset,
    base: &TrainConfig,
) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(TrainError::EmptyGrid);
    }
    for (index, point) in grid.iter().enumerate() {
        if point.arch.kind() != kind {
            return Err(TrainError::GridKindMismatch {
                index,
                got: point.arch.kind().cli_name().to_string(),
                expected: kind.cli_name().to_string(),
            });
        }
        point.arch.validate()?;
        if !point.learning_rate.is_finite() || point.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig(format!(
                "grid point {index}: learning_rate must be finite and > 0, got {}",
                point.learning_rate
            )));
        }
    }

    let norm = Standardizer::fit(&data.train.samples)?;
    let mut results = Vec::with_capacity(grid.len());
    for point in grid {
        let mut cfg = base.clone();
        cfg.fine_tune = false;
        cfg.learning_rate = point.learning_rate;
        cfg.max_epochs = base.max_epochs.min(GRID_SEARCH_MAX_EPOCHS);
        cfg.validate()?;
        let mut model = build_model(&point.arch, norm.clone(), cfg.seed)?;
        let parameter_count = model.parameter_count();
        match train(&mut model, data, &cfg) {
            Ok(report) => results.push(GridPointResult {
                point: point.clone(),
                best_val_mse: report.best_val_mse,
                parameter_count,
                failure: None,
            }),
            Err(e @ (TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. })) => {
                results.push(GridPointResult {
                    point: point.clone(),
                    best_val_mse: f64::INFINITY,
                    parameter_count,
                    failure: Some(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        }
    }
    if results.iter().all(|r| r.failure.is_some()) {
        return Err(TrainError::AllGridPointsFailed(grid.len()));
    }
    let ranked: Vec<(f64, usize)> =
        results.iter().map(|r| (r.best_val_mse, r.parameter_count)).collect();
    let best_index = select_best(&ranked);
    Ok(GridOutcome { best: results[best_index].point.clone(), best_index, results })
}
