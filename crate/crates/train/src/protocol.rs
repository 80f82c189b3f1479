//! Early-stopping and learning-rate schedule, factored out as a pure state
//! machine so the patience arithmetic can be tested against scripted
//! validation traces.

/// Minimum decrease of the best-so-far validation MSE that counts as an
/// improvement for patience purposes. Guards against float noise keeping a
/// plateaued run alive.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Tracks two notions of "best":
///
/// * the strict minimum of the validation trace, which decides which weights
///   are kept (any decrease, however small, moves the snapshot), and
/// * a tolerance-gated reference that drives patience: only a decrease of at
///   least [`IMPROVEMENT_TOLERANCE`] resets the early-stop and halving
///   counters.
///
/// A tolerance-gated improvement is always also a strict one, so the kept
/// weights are never worse than what the patience logic considers best.
#[derive(Clone, Debug)]
pub struct ProtocolState {
    lr: f64,
    lr_halve_patience: usize,
    early_stop_patience: usize,
    best_val: f64,
    best_epoch: usize,
    patience_best: f64,
    since_improvement: usize,
    since_lr_event: usize,
    last_was_new_best: bool,
}

impl ProtocolState {
    pub fn new(initial_lr: f64, lr_halve_patience: usize, early_stop_patience: usize) -> Self {
        Self::seeded(initial_lr, lr_halve_patience, early_stop_patience, f64::INFINITY, 0)
    }

    /// Start from a pre-training validation value so that "epoch 0" competes
    /// as a selection candidate (used by fine-tuning).
    pub fn with_baseline(
        initial_lr: f64,
        lr_halve_patience: usize,
        early_stop_patience: usize,
        epoch0_val: f64,
    ) -> Self {
        Self::seeded(initial_lr, lr_halve_patience, early_stop_patience, epoch0_val, 0)
    }

    fn seeded(
        lr: f64,
        lr_halve_patience: usize,
        early_stop_patience: usize,
        baseline: f64,
        baseline_epoch: usize,
    ) -> Self {
        Self {
            lr,
            lr_halve_patience,
            early_stop_patience,
            best_val: baseline,
            best_epoch: baseline_epoch,
            patience_best: baseline,
            since_improvement: 0,
            since_lr_event: 0,
            last_was_new_best: false,
        }
    }

    /// Learning rate for the next training epoch. Only ever multiplied by
    /// exactly 0.5, so every value is initial_lr * 2^-k.
    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best_val(&self) -> f64 {
        self.best_val
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    /// Whether the most recent [`observe`](Self::observe) set a new strict
    /// minimum — the cue to snapshot the current weights.
    pub fn last_improved_best(&self) -> bool {
        self.last_was_new_best
    }

    /// Record the validation MSE of a finished epoch. The caller guarantees
    /// the value is finite (non-finite values abort the run upstream).
    pub fn observe(&mut self, epoch: usize, val_mse: f64) -> Decision {
        debug_assert!(val_mse.is_finite());
        self.last_was_new_best = val_mse < self.best_val;
        if self.last_was_new_best {
            self.best_val = val_mse;
            self.best_epoch = epoch;
        }
        if self.patience_best - val_mse >= IMPROVEMENT_TOLERANCE {
            self.patience_best = val_mse;
            self.since_improvement = 0;
            self.since_lr_event = 0;
            return Decision::Continue;
        }
        self.since_improvement += 1;
        self.since_lr_event += 1;
        if self.since_lr_event >= self.lr_halve_patience {
            self.lr *= 0.5;
            self.since_lr_event = 0;
        }
        if self.since_improvement >= self.early_stop_patience {
            return Decision::Stop;
        }
        Decision::Continue
    }
}
