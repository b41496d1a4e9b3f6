//! Learning-rate schedule: linear warm-up to a peak set by the model width,
//! then plateau halving driven by the best validation loss (BVL), with early
//! stopping.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LrSchedule {
    pub model_dim: usize,
    pub warmup_steps: u64,
}

impl LrSchedule {
    /// lr(n) = 0.1 * N^-0.5 * n * W^-1.5 during warm-up; the peak value is
    /// held once warm-up completes (halvings are applied on top by the
    /// plateau tracker).
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps as f64;
        if w <= 0.0 {
            return 0.0;
        }
        let n = (step as f64).min(w);
        0.1 * (self.model_dim as f64).powf(-0.5) * n * w.powf(-1.5)
    }

    pub fn peak(&self) -> f64 {
        self.lr_at(self.warmup_steps)
    }

    pub fn warmed_up(&self, step: u64) -> bool {
        step >= self.warmup_steps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauAction {
    Improved,
    NoChange,
    Halve,
    Stop,
}

/// Tracks the best validation loss; signals a halving after `halve_patience`
/// consecutive non-improving epochs and a stop after `stop_patience`.
#[derive(Debug, Clone)]
pub struct PlateauTracker {
    best: f64,
    epochs_since_improve: u32,
    halvings: u32,
    halve_patience: u32,
    stop_patience: u32,
}

impl PlateauTracker {
    pub fn new(halve_patience: u32, stop_patience: u32) -> Self {
        PlateauTracker {
            best: f64::INFINITY,
            epochs_since_improve: 0,
            halvings: 0,
            halve_patience,
            stop_patience,
        }
    }

    /// Epoch-end observation. Halving only fires when `allow_halving` is
    /// true (warm-up must have completed).
    pub fn observe(&mut self, val_loss: f64, allow_halving: bool) -> PlateauAction {
        if val_loss < self.best {
            self.best = val_loss;
            self.epochs_since_improve = 0;
            return PlateauAction::Improved;
        }
        self.epochs_since_improve += 1;
        if self.epochs_since_improve >= self.stop_patience {
            return PlateauAction::Stop;
        }
        if allow_halving && self.epochs_since_improve % self.halve_patience == 0 {
            self.halvings += 1;
            return PlateauAction::Halve;
        }
        PlateauAction::NoChange
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    pub fn epochs_since_improve(&self) -> u32 {
        self.epochs_since_improve
    }

    /// Multiplier applied on top of the warm-up schedule.
    pub fn lr_multiplier(&self) -> f64 {
        0.5f64.powi(self.halvings as i32)
    }
}
