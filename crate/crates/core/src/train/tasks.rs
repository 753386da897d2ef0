use crate::autodiff::{dice_sums, Tape};
use crate::error::{Error, Result};
use crate::net25d::{BranchSchedule, Net25D};
use crate::params::ParamStore;
use crate::phantom::{MipPair, Sample};
use crate::seed::mix;
use crate::tensor::Tensor;
use crate::unet::{crop_to_divisible, Mode, UNet};
use crate::volume::Volume;

use super::Task;

pub(crate) fn dice_loss_value(pred: &[f32], truth: &[f32]) -> f64 {
    let (inter, denom) = dice_sums(pred, truth);
    1.0 - 2.0 * inter / denom
}

fn mask_f32(m: &[u8]) -> Vec<f32> {
    m.iter().map(|&v| f32::from(v)).collect()
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Items scored by `val_loss`: the validation set, or the training set when
/// no validation items exist.
fn scored<'a, I>(val: &'a [I], train: &'a [I]) -> &'a [I] {
    if val.is_empty() {
        train
    } else {
        val
    }
}

/// A U-net batch: inputs stacked along N, and the matching targets.
struct Stack {
    x: Tensor<f32>,
    y: Tensor<f32>,
}

fn stack(items: &[&(Vec<f32>, Vec<f32>)], spatial: &[usize]) -> Result<Stack> {
    let mut shape = vec![items.len(), 1];
    shape.extend_from_slice(spatial);
    let x = items.iter().flat_map(|(x, _)| x.iter().copied()).collect();
    let y = items.iter().flat_map(|(_, y)| y.iter().copied()).collect();
    Ok(Stack { x: Tensor::from_vec(&shape, x)?, y: Tensor::from_vec(&shape, y)? })
}

/// A standalone U-net on fixed-size inputs (images or volumes).
struct UNetTask {
    net: UNet<f32>,
    spatial: Vec<usize>,
    train: Vec<(Vec<f32>, Vec<f32>)>,
    val: Vec<(Vec<f32>, Vec<f32>)>,
}

impl UNetTask {
    fn train_batch(&mut self, items: &[usize], seed: u64) -> Result<f64> {
        let refs: Vec<_> = items.iter().map(|&i| &self.train[i]).collect();
        let s = stack(&refs, &self.spatial)?;
        let mut tape = Tape::new();
        let x = tape.constant(s.x);
        let (y, bn) = self.net.arch.forward(&self.net.params, &mut tape, x, Mode::Train { seed })?;
        let loss = tape.dice_loss(y, &s.y)?;
        tape.backward(loss)?;
        self.net.params.pull_grads(&tape);
        crate::unet::UNetArch::commit_bn(&mut self.net.params, &bn);
        Ok(f64::from(tape.value(loss).data()[0]))
    }

    fn val_loss(&self) -> Result<f64> {
        let items = scored(&self.val, &self.train);
        let mut losses = Vec::with_capacity(items.len());
        for chunk in items.chunks(8) {
            let refs: Vec<_> = chunk.iter().collect();
            let s = stack(&refs, &self.spatial)?;
            let pred = self.net.predict(s.x)?;
            let per = pred.numel() / chunk.len();
            for (i, (_, truth)) in chunk.iter().enumerate() {
                losses.push(dice_loss_value(&pred.data()[i * per..(i + 1) * per], truth));
            }
        }
        Ok(mean(losses.into_iter()))
    }
}

/// 2D U-net on projection pairs.
pub struct MipTask(UNetTask);

impl MipTask {
    pub fn new(net: UNet<f32>, train: &[MipPair], val: &[MipPair]) -> Result<Self> {
        let first = train.first().ok_or_else(|| Error::Data("no training pairs".into()))?;
        let (rows, cols) = (first.image.rows, first.image.cols);
        let conv = |ps: &[MipPair]| -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
            ps.iter()
                .map(|p| {
                    if (p.image.rows, p.image.cols) != (rows, cols) {
                        return Err(Error::Data(format!("{}: image shape differs", p.sample_id)));
                    }
                    Ok((p.image.data.clone(), mask_f32(&p.mask.data)))
                })
                .collect()
        };
        Ok(Self(UNetTask { net, spatial: vec![rows, cols], train: conv(train)?, val: conv(val)? }))
    }

    pub fn into_net(self) -> UNet<f32> {
        self.0.net
    }
}

impl Task for MipTask {
    fn train_len(&self) -> usize {
        self.0.train.len()
    }
    fn store(&self) -> &ParamStore<f32> {
        &self.0.net.params
    }
    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.0.net.params
    }
    fn train_batch(&mut self, items: &[usize], seed: u64) -> Result<f64> {
        self.0.train_batch(items, seed)
    }
    fn val_loss(&self) -> Result<f64> {
        self.0.val_loss()
    }
}

fn cropped(samples: &[Sample], levels: [usize; 3]) -> Result<Vec<(Volume<f32>, Volume<u8>)>> {
    samples
        .iter()
        .map(|s| Ok((crop_to_divisible(&s.volume, levels)?.0, crop_to_divisible(&s.mask, levels)?.0)))
        .collect()
}

/// 3D U-net on whole volumes (cropped to a multiple of `2^depth`).
pub struct UNet3DTask(UNetTask);

impl UNet3DTask {
    pub fn new(net: UNet<f32>, train: &[Sample], val: &[Sample]) -> Result<Self> {
        let d = net.arch.cfg.depth;
        let conv = |s: &[Sample]| -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
            Ok(cropped(s, [d; 3])?.into_iter().map(|(v, m)| (v.into_data(), mask_f32(m.data()))).collect())
        };
        let train_v = conv(train)?;
        let ext = crop_to_divisible(&train.first().ok_or_else(|| Error::Data("no training volumes".into()))?.volume, [d; 3])?.1.kept;
        Ok(Self(UNetTask { net, spatial: ext.to_vec(), train: train_v, val: conv(val)? }))
    }

    pub fn into_net(self) -> UNet<f32> {
        self.0.net
    }
}

impl Task for UNet3DTask {
    fn train_len(&self) -> usize {
        self.0.train.len()
    }
    fn store(&self) -> &ParamStore<f32> {
        &self.0.net.params
    }
    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.0.net.params
    }
    fn train_batch(&mut self, items: &[usize], seed: u64) -> Result<f64> {
        self.0.train_batch(items, seed)
    }
    fn val_loss(&self) -> Result<f64> {
        self.0.val_loss()
    }
}

/// Projection network trained on the volumetric Dice loss. Minibatches larger
/// than one average the per-volume gradients.
pub struct Net25DTask {
    pub net: Net25D<f32>,
    pub schedule: BranchSchedule,
    train: Vec<(Volume<f32>, Volume<u8>)>,
    val: Vec<(Volume<f32>, Volume<u8>)>,
}

impl Net25DTask {
    pub fn new(net: Net25D<f32>, train: &[Sample], val: &[Sample]) -> Result<Self> {
        let d = net.arch.cfg.unet.depth;
        let schedule = net.arch.cfg.schedule;
        Ok(Self { net, schedule, train: cropped(train, [0, d, d])?, val: cropped(val, [0, d, d])? })
    }

    pub fn into_net(self) -> Net25D<f32> {
        self.net
    }
}

impl Task for Net25DTask {
    fn train_len(&self) -> usize {
        self.train.len()
    }
    fn store(&self) -> &ParamStore<f32> {
        &self.net.params
    }
    fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.net.params
    }
    fn train_batch(&mut self, items: &[usize], seed: u64) -> Result<f64> {
        let mut total = 0.0;
        let mut updates = Vec::new();
        for (k, &i) in items.iter().enumerate() {
            let (x, m) = &self.train[i];
            let (loss, bn) = self.net.loss_and_grad(x, m, mix(seed, k as u64), self.schedule)?;
            total += loss;
            updates.extend(bn);
        }
        if items.len() > 1 {
            let s = 1.0 / items.len() as f32;
            for p in self.net.params.iter_mut() {
                for g in p.grad.data_mut() {
                    *g *= s;
                }
            }
        }
        crate::unet::UNetArch::commit_bn(&mut self.net.params, &updates);
        Ok(total / items.len() as f64)
    }

    fn val_loss(&self) -> Result<f64> {
        let items = scored(&self.val, &self.train);
        let mut losses = Vec::with_capacity(items.len());
        for (x, m) in items {
            let y = self.net.forward(x)?;
            losses.push(dice_loss_value(y.data(), &mask_f32(m.data())));
        }
        Ok(mean(losses.into_iter()))
    }
}
