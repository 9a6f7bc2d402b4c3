use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub lr_min: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 3,
            min_delta: 1e-5,
            lr_min: 1e-7,
        }
    }
}

/// Reduces the learning rate when validation loss stops improving.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub config: PlateauConfig,
    lr: f64,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(config: PlateauConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Forgets the best loss seen so far, keeping the current rate.
    pub fn reset_best(&mut self) {
        self.best = f64::INFINITY;
        self.stale = 0;
    }

    /// Records one validation loss and returns the rate to use next.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.config.min_delta {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.lr_min);
                self.stale = 0;
            }
        }
        self.lr
    }
}
