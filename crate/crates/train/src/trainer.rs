//! The training loop shared by every architecture.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use threetank_autodiff::{AdError, Graph, ParamSet, Tensor};
use threetank_models::{ArchKind, ForwardMode, Model};
use threetank_sim::rng::{stream_rng, SHUFFLE_STREAM};
use threetank_sim::{Dataset, Sample};

use crate::adam::Adam;
use crate::protocol::{Decision, ProtocolState};
use crate::{Result, TrainConfig, TrainError, FINE_TUNE_MAX_EPOCHS};

/// One completed training epoch. `lr` is the rate the epoch's updates used.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

/// Pre-fine-tuning metrics of the incoming weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Epoch0Record {
    /// Forecast MSE on the validation split, standardized units.
    pub val_mse: f64,
    /// Forecast MSE on the test split, original units.
    pub test_mse: f64,
}

/// Outcome of a training or fine-tuning run. The model handed to the loop is
/// left holding the weights of `best_epoch` (epoch 0 means the weights it
/// came in with).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub epoch0: Option<Epoch0Record>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub wall_time_secs: f64,
}

pub(crate) fn records_csv(records: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_mse,val_mse,lr\n");
    for r in records {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", r.epoch, r.train_mse, r.val_mse, r.lr));
    }
    out
}

/// Flat key/value summary of a run, suitable for TOML persistence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub epochs_run: usize,
    pub final_lr: f64,
    pub wall_time_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch0_val_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch0_test_mse: Option<f64>,
    pub config: TrainConfig,
}

impl TrainReport {
    /// Per-epoch trace as `epoch,train_mse,val_mse,lr` CSV.
    pub fn csv(&self) -> String {
        records_csv(&self.epochs)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.csv())?;
        Ok(())
    }

    pub fn summary(&self, config: &TrainConfig) -> TrainSummary {
        TrainSummary {
            best_epoch: self.best_epoch,
            best_val_mse: self.best_val_mse,
            epochs_run: self.epochs.len(),
            final_lr: self.epochs.last().map_or(config.learning_rate, |r| r.lr),
            wall_time_secs: self.wall_time_secs,
            epoch0_val_mse: self.epoch0.map(|e| e.val_mse),
            epoch0_test_mse: self.epoch0.map(|e| e.test_mse),
            config: config.clone(),
        }
    }

    pub fn write_summary(&self, path: impl AsRef<Path>, config: &TrainConfig) -> Result<()> {
        let text = toml::to_string_pretty(&self.summary(config))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Micro-batch size for evaluation passes. Autoregressive transformer
/// decoding builds all 50 decode steps in one graph, whose cross-attention
/// activations grow with batch size, so those models evaluate in small
/// slices; everything else uses the training default.
pub fn eval_batch_size(kind: ArchKind) -> usize {
    match kind {
        ArchKind::Transformer | ArchKind::TransformerCe => 8,
        _ => 32,
    }
}

/// Mean squared forecast error over `samples` in standardized units, with
/// autoregressive decoders teacher-forced (one pass, dropout inactive).
/// This is the quantity the selection protocol watches.
pub fn validation_mse(model: &Model, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut weighted_sum = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = model.norm.batch_input(samples, chunk);
        let y = model.norm.batch_target(samples, chunk);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &ForwardMode::Val { target: &y })?;
        let target = g.constant(y);
        let mse = g.mse_loss(out.forecast, target)?;
        // Every sample contributes the same number of cells, so batch means
        // weighted by batch length recombine into the global mean.
        weighted_sum += g.value(mse).item() * chunk.len() as f64;
    }
    Ok(weighted_sum / samples.len() as f64)
}

/// De-standardized forecasts for `samples`, row-major `[N x 150]`, with
/// autoregressive decoders feeding on their own predictions. This is the
/// single forecast implementation every deployment-mode consumer (MSE,
/// forecast dumps) reads from, so their numbers agree bit for bit.
pub fn forecast_original(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let cells_per_sample = samples[0].target.len();
    let mut all = Vec::with_capacity(samples.len() * cells_per_sample);
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = model.norm.batch_input(samples, chunk);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, &ForwardMode::Eval)?;
        let mut pred = g.value(out.forecast).data().to_vec();
        model.norm.denormalize_flat(&mut pred);
        all.extend_from_slice(&pred);
    }
    Ok(all)
}

/// Mean squared forecast error in original (de-standardized) units, with
/// autoregressive decoders feeding on their own predictions — the deployment
/// reading of a model's accuracy.
pub fn forecast_mse_original(model: &Model, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let pred = forecast_original(model, samples, batch_size)?;
    let cells_per_sample = samples[0].target.len();
    let mut sq_sum = 0.0;
    for (si, sample) in samples.iter().enumerate() {
        let base = si * cells_per_sample;
        for (j, t) in sample.target.iter().enumerate() {
            let d = pred[base + j] - t;
            sq_sum += d * d;
        }
    }
    Ok(sq_sum / (samples.len() * cells_per_sample) as f64)
}

fn snapshot(params: &ParamSet) -> Vec<Tensor> {
    params.iter().map(|p| p.value()).collect()
}

fn restore(params: &ParamSet, snap: &[Tensor]) {
    for (p, t) in params.iter().zip(snap.iter()) {
        p.set_value(t.clone());
    }
}

/// Train `model` on `data.train`, selecting on `data.val`. The model is left
/// holding the weights of the best validation epoch, and the report's trace
/// has one row per completed epoch.
pub fn train(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    run_loop(model, data, config)
}

/// Continue training from the model's current weights under the fine-tuning
/// epoch cap, recording the incoming weights' validation and test error and
/// keeping them as a selection candidate: the result is never worse on
/// validation than where it started.
pub fn fine_tune(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    let mut cfg = config.clone();
    cfg.fine_tune = true;
    cfg.max_epochs = cfg.max_epochs.min(FINE_TUNE_MAX_EPOCHS);
    cfg.validate()?;
    run_loop(model, data, &cfg)
}

fn run_loop(model: &mut Model, data: &Dataset, config: &TrainConfig) -> Result<TrainReport> {
    let started = Instant::now();
    let train_samples = &data.train.samples;
    let val_samples = &data.val.samples;
    if train_samples.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_samples.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }

    let mut epoch0 = None;
    let mut protocol = if config.fine_tune {
        let val0 = validation_mse(model, val_samples, config.batch_size)?;
        if !val0.is_finite() {
            return Err(TrainError::Diverged { epoch: 0, trace: Vec::new() });
        }
        let test0 =
            forecast_mse_original(model, &data.test.samples, eval_batch_size(model.kind()))?;
        epoch0 = Some(Epoch0Record { val_mse: val0, test_mse: test0 });
        ProtocolState::with_baseline(
            config.learning_rate,
            config.lr_halve_patience,
            config.early_stop_patience,
            val0,
        )
    } else {
        ProtocolState::new(
            config.learning_rate,
            config.lr_halve_patience,
            config.early_stop_patience,
        )
    };

    let mut best_weights = snapshot(model.params());
    let mut adam = Adam::new(model.params());
    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut indices: Vec<usize> = (0..train_samples.len()).collect();
    let mut records: Vec<EpochRecord> = Vec::new();

    for epoch in 1..=config.effective_max_epochs() {
        let lr = protocol.lr();
        indices.shuffle(&mut shuffle_rng);
        let mut weighted_mse = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            model.params().zero_grads();
            let x = model.norm.batch_input(train_samples, chunk);
            let y = model.norm.batch_target(train_samples, chunk);
            let mut g = Graph::new();
            let out = model.forward(&mut g, &x, &ForwardMode::Train { target: &y })?;
            let target = g.constant(y);
            let mse = g.mse_loss(out.forecast, target)?;
            // Auxiliary objectives join the optimized loss; the reported
            // train MSE stays the forecast error so the columns of the
            // report are directly comparable.
            let objective = match out.aux_loss {
                Some(aux) => g.add(mse, aux)?,
                None => mse,
            };
            match g.backward(objective) {
                Ok(()) => {}
                Err(AdError::NonFinite { .. }) => {
                    return Err(TrainError::Diverged { epoch, trace: records });
                }
                Err(e) => return Err(e.into()),
            }
            weighted_mse += g.value(mse).item() * chunk.len() as f64;
            adam.step(model.params(), lr)?;
        }
        let train_mse = weighted_mse / train_samples.len() as f64;
        let val_mse = validation_mse(model, val_samples, config.batch_size)?;
        if !val_mse.is_finite() {
            return Err(TrainError::Diverged { epoch, trace: records });
        }
        records.push(EpochRecord { epoch, train_mse, val_mse, lr });
        let decision = protocol.observe(epoch, val_mse);
        if protocol.last_improved_best() {
            best_weights = snapshot(model.params());
        }
        if decision == Decision::Stop {
            break;
        }
    }

    restore(model.params(), &best_weights);
    Ok(TrainReport {
        epochs: records,
        epoch0,
        best_epoch: protocol.best_epoch(),
        best_val_mse: protocol.best_val(),
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
