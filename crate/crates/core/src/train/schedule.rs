//! Validation-driven learning-rate reduction and early stopping.

use serde::{Deserialize, Serialize};

/// Smallest decrease of the validation loss that counts as an improvement.
pub const MIN_DELTA: f64 = 1e-5;

/// Multiplies the learning rate by `factor` once the validation loss has not
/// improved for `patience` consecutive epochs, then starts counting again.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self { factor, patience, min_delta: MIN_DELTA, best: f64::INFINITY, wait: 0 }
    }

    /// Feeds one epoch's validation loss; returns the learning rate to use
    /// from the next epoch on.
    pub fn observe(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopSignal {
    /// This epoch set a new best; its weights should be kept.
    pub improved: bool,
    pub stop: bool,
}

/// Signals a stop after `patience` consecutive epochs without improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopper {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self { patience, min_delta: MIN_DELTA, best: f64::INFINITY, best_epoch: None, wait: 0 }
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopSignal {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return StopSignal { improved: true, stop: false };
        }
        self.wait += 1;
        StopSignal { improved: false, stop: self.wait >= self.patience }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_trace_halves_after_fourth_epoch() {
        let mut s = PlateauScheduler::new(0.5, 3);
        let mut lr = 1e-3;
        let mut seen = vec![];
        for v in [1.0, 1.0, 1.0, 1.0] {
            lr = s.observe(v, lr);
            seen.push(lr);
        }
        assert_eq!(seen, vec![1e-3, 1e-3, 1e-3, 5e-4]);
    }

    #[test]
    fn stopper_fires_on_fifth_flat_epoch() {
        let mut s = EarlyStopper::new(5);
        let stops: Vec<bool> = [0.5, 0.6, 0.6, 0.6, 0.6, 0.6].iter().enumerate().map(|(e, v)| s.observe(e + 1, *v).stop).collect();
        assert_eq!(stops, vec![false, false, false, false, false, true]);
        assert_eq!(s.best(), Some((1, 0.5)));
    }
}
