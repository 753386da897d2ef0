//! Synthetic-trace drivers for the training protocol state machines.

use mseg_core::params::ParamStore;
use mseg_core::train::{train, EarlyStopper, PlateauScheduler, Task, TrainConfig, TrainReport};
use mseg_core::{Result, Tensor};

/// Learning rate in force after each observed validation loss.
pub fn lr_trace(vals: &[f64], factor: f64, patience: usize, lr0: f64) -> Vec<f64> {
    let mut s = PlateauScheduler::new(factor, patience);
    let mut lr = lr0;
    vals.iter()
        .map(|&v| {
            lr = s.observe(v, lr);
            lr
        })
        .collect()
}

/// 1-based epoch at which the stopper fires, if it does.
pub fn stop_epoch(vals: &[f64], patience: usize) -> Option<usize> {
    let mut s = EarlyStopper::new(patience);
    vals.iter().enumerate().map(|(e, &v)| (e + 1, s.observe(e + 1, v))).find(|(_, sig)| sig.stop).map(|(e, _)| e)
}

/// A task whose "weights" are an epoch counter: each epoch advances it and
/// the validation loss is read off a scripted trace.
pub struct TraceTask {
    store: ParamStore<f32>,
    trace: Vec<f64>,
}

impl TraceTask {
    pub fn new(trace: Vec<f64>) -> Self {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(0.0), true).unwrap();
        store.register("epoch", Tensor::scalar(0.0), false).unwrap();
        Self { store, trace }
    }

    fn epoch(&self) -> usize {
        self.store.value(self.store.find("epoch").unwrap()).data()[0] as usize
    }
}

impl Task for TraceTask {
    fn train_len(&self) -> usize {
        1
    }
    fn store(&self) -> &ParamStore<f32> {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }
    fn train_batch(&mut self, _: &[usize], _: u64) -> Result<f64> {
        let id = self.store.find("epoch").unwrap();
        self.store.get_mut(id).value.data_mut()[0] += 1.0;
        Ok(self.trace[self.epoch() - 1])
    }
    fn val_loss(&self) -> Result<f64> {
        Ok(self.trace[self.epoch() - 1])
    }
}

/// Runs the epoch loop on a scripted trace.
pub fn run_trace(trace: &[f64], cfg: &TrainConfig) -> TrainReport {
    let mut task = TraceTask::new(trace.to_vec());
    train(&mut task, cfg).unwrap()
}

/// A trace that improves, then plateaus long enough to stop.
pub fn plateau_trace() -> Vec<f64> {
    vec![0.9, 0.7, 0.55, 0.61, 0.52, 0.58, 0.6, 0.53, 0.57, 0.59, 0.4, 0.3]
}
