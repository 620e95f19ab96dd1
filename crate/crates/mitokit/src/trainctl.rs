//! Training-control primitives: cyclical learning-rate schedule,
//! early-stopping/checkpoint state machine, and the two loss formulas.
//!
//! None of this trains anything. External training adapters call into these
//! so that their schedules and stopping behaviour match the reference
//! protocol bit for bit: a triangular cyclical learning rate with a maximum
//! of 1e-4, early stopping on validation loss with a patience of ten epochs
//! for the detector and fifty for the classifier, binary cross-entropy for
//! classification heads and smooth L1 for regression heads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrainCtlError {
    /// `observe` was called on a state machine that already stopped.
    #[error("observe called after early stopping already fired")]
    ObserveAfterStop,
}

/// Cyclical learning-rate policy. Only the triangular wave is implemented;
/// the variant is kept as an enum so configs stay explicit about it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CyclicalPolicy {
    #[default]
    Triangular,
}

/// Configuration of the cyclical learning-rate schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CyclicalLrConfig {
    /// Peak learning rate, reached at the midpoint of every cycle.
    pub max_lr: f64,
    /// Floor learning rate at cycle boundaries.
    pub base_lr: f64,
    /// Iterations per half-cycle.
    pub step_size: u64,
    pub policy: CyclicalPolicy,
}

impl Default for CyclicalLrConfig {
    fn default() -> Self {
        Self {
            max_lr: 1e-4,
            base_lr: 1e-5,
            step_size: 4,
            policy: CyclicalPolicy::Triangular,
        }
    }
}

impl CyclicalLrConfig {
    /// Learning rate at a zero-based iteration index.
    ///
    /// Triangular wave: base_lr at iterations 0, 2·step_size, 4·step_size, …
    /// and max_lr at step_size, 3·step_size, …, linear in between.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        debug_assert!(self.step_size >= 1, "step_size must be >= 1");
        let step = self.step_size as f64;
        let it = iteration as f64;
        let cycle = (1.0 + it / (2.0 * step)).floor();
        let x = (it / step - 2.0 * cycle + 1.0).abs();
        let m = (1.0 - x).max(0.0);
        // Convex combination so the endpoints are exact in floating point.
        self.base_lr * (1.0 - m) + self.max_lr * m
    }

    /// Schedule rows `(iteration, lr)` for iterations `0..n`.
    pub fn dump(&self, n: u64) -> Vec<(u64, f64)> {
        (0..n).map(|it| (it, self.lr_at(it))).collect()
    }
}

/// Action requested by the early-stopping state machine after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopAction {
    /// Validation loss improved; persist the model.
    SaveCheckpoint,
    /// No improvement, patience not yet exhausted.
    Continue,
    /// Patience exhausted; training should stop.
    Stop,
}

/// Early-stopping/checkpoint state machine over validation losses.
///
/// An epoch improves when its loss is strictly below `best_loss - min_delta`.
/// After `patience` consecutive non-improving epochs the machine stops.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub best_loss: f64,
    pub epochs_since_improvement: u32,
    pub patience: u32,
    pub min_delta: f64,
    pub stopped: bool,
    /// Epoch index of the best observed loss; meaningless until the first
    /// observation.
    pub best_epoch: u64,
}

impl EarlyStopState {
    pub fn new(patience: u32) -> Self {
        Self::with_min_delta(patience, 0.0)
    }

    pub fn with_min_delta(patience: u32, min_delta: f64) -> Self {
        assert!(patience >= 1, "patience must be >= 1");
        Self {
            best_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            patience,
            min_delta,
            stopped: false,
            best_epoch: 0,
        }
    }

    /// Feed one epoch's validation loss. Epochs must be observed in order.
    pub fn observe(&mut self, epoch: u64, val_loss: f64) -> Result<StopAction, TrainCtlError> {
        if self.stopped {
            return Err(TrainCtlError::ObserveAfterStop);
        }
        if val_loss < self.best_loss - self.min_delta {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
            Ok(StopAction::SaveCheckpoint)
        } else {
            self.epochs_since_improvement += 1;
            if self.epochs_since_improvement >= self.patience {
                self.stopped = true;
                Ok(StopAction::Stop)
            } else {
                Ok(StopAction::Continue)
            }
        }
    }
}

/// Smooth L1 loss of a residual: `0.5·x²` inside the unit interval,
/// `|x| − 0.5` outside.
pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Floor used to keep `bce` finite at p = 0 and p = 1.
pub const BCE_EPSILON: f64 = 1e-7;

/// Binary cross-entropy of a predicted probability against a binary target.
///
/// The probability is clamped to `[BCE_EPSILON, 1 − BCE_EPSILON]` so the
/// function is total.
pub fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}
