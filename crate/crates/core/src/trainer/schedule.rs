use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduce-on-plateau learning-rate state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Plateau {
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

/// Relative slack on the stop comparison, so that repeated multiplication
/// landing a hair under the threshold (2e-4 · 0.1 · 0.1) does not stop.
const STOP_SLACK: f64 = 1e-9;

impl Plateau {
    pub fn new(lr: f64) -> Self {
        Plateau {
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Records one validation loss. After `patience` consecutive epochs
    /// without a strict improvement the rate is multiplied by `factor`.
    /// Returns the new rate and whether it has fallen below `stop_below`.
    pub fn step(&mut self, val_loss: f64, factor: f64, patience: usize, stop_below: f64) -> Result<(f64, bool)> {
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { op: "validation loss" });
        }
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= patience {
                self.lr *= factor;
                self.bad_epochs = 0;
            }
        }
        Ok((self.lr, self.lr < stop_below * (1.0 - STOP_SLACK)))
    }

    /// Forgets the best loss, keeping the rate.
    pub fn reset_best(&mut self) {
        self.best = f64::INFINITY;
        self.bad_epochs = 0;
    }
}
