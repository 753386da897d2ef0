//! Training protocol shared by all networks: seeded shuffling, minibatch
//! Adam steps, plateau learning-rate reduction and early stopping with
//! restoration of the best weights.

mod eval;
mod experiment;
mod report;
mod resources;
pub mod schedule;
mod tasks;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::seed::mix;

pub use eval::{evaluate, evaluate_mip, evaluate_with, run_slicewise_2d, EvalSummary, Predictor, SampleRow};
pub use experiment::{
    compare, init_seed, partition, run_model, sweep_directions, train_mip_unet, train_net25d, train_unet3d, CompareConfig,
    CompareRow, SweepRow, TrainedNet, TrainedRun,
};
pub use report::{write_compare_csv, write_metrics_csv, write_sweep_csv, write_train_log};
pub use resources::{flops_per_step, memory_estimate, MemoryEstimate, Model, NetKind};
pub use schedule::{EarlyStopper, PlateauScheduler, StopSignal};
pub use tasks::{MipTask, Net25DTask, UNet3DTask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub minibatch: usize,
    pub seed: u64,
    pub threshold: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            lr_factor: 0.5,
            lr_patience: 3,
            stop_patience: 5,
            max_epochs: 100,
            minibatch: 1,
            seed: 0,
            threshold: 0.5,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_patience == 0 || self.stop_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!("lr_factor {} outside (0, 1)", self.lr_factor)));
        }
        if self.minibatch == 0 || self.max_epochs == 0 {
            return Err(Error::Config("minibatch and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

/// A network together with its training and validation data.
pub trait Task {
    fn train_len(&self) -> usize;
    fn store(&self) -> &ParamStore<f32>;
    fn store_mut(&mut self) -> &mut ParamStore<f32>;
    /// Loss of one minibatch of training items; parameter gradients are
    /// accumulated into the store and batchnorm statistics committed.
    fn train_batch(&mut self, items: &[usize], seed: u64) -> Result<f64>;
    /// Mean loss over the validation items, inference mode.
    fn val_loss(&self) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss recomputed after restoring the best weights.
    pub restored_val_loss: f64,
    pub stop_reason: StopReason,
    pub wall_seconds: f64,
    pub params: usize,
}

impl TrainReport {
    pub fn seconds_per_epoch(&self) -> f64 {
        self.wall_seconds / self.epochs.len().max(1) as f64
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    v
}

/// Runs the epoch loop until early stopping or `max_epochs`, then restores
/// the weights of the best validation epoch.
pub fn train<K: Task>(task: &mut K, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if task.train_len() == 0 {
        return Err(Error::Data("no training items".into()));
    }
    let start = Instant::now();
    let mut adam = AdamState::new(task.store(), cfg.adam());
    let mut sched = PlateauScheduler::new(cfg.lr_factor, cfg.lr_patience);
    let mut stopper = EarlyStopper::new(cfg.stop_patience);
    let mut best = task.store().snapshot();
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let lr = adam.learning_rate();
        let order = shuffled(task.train_len(), mix(cfg.seed, epoch as u64));
        let mut total = 0.0;
        for (b, batch) in order.chunks(cfg.minibatch).enumerate() {
            task.store_mut().zero_grads();
            let loss = task.train_batch(batch, mix(cfg.seed, ((epoch as u64) << 32) | b as u64))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss {loss} at seed {}, epoch {epoch}, batch {b}", cfg.seed)));
            }
            adam.step(task.store_mut());
            total += loss * batch.len() as f64;
        }
        let val_loss = task.val_loss()?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss {val_loss} at seed {}, epoch {epoch}", cfg.seed)));
        }
        epochs.push(EpochLog { epoch, train_loss: total / task.train_len() as f64, val_loss, lr });
        let signal = stopper.observe(epoch, val_loss);
        if signal.improved {
            best = task.store().snapshot();
        }
        adam.set_learning_rate(sched.observe(val_loss, lr));
        if signal.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    task.store_mut().restore(&best);
    let (best_epoch, best_val_loss) = stopper.best().expect("at least one finite epoch");
    let restored_val_loss = task.val_loss()?;
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_loss,
        restored_val_loss,
        stop_reason,
        wall_seconds: start.elapsed().as_secs_f64(),
        params: task.store().count_trainable(),
    })
}
