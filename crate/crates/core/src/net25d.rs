//! The projection network: MIPs from `p` directions, a shared 2D U-net on
//! each, a learnable 1x3 filter per direction, backprojection into the
//! volume, then average pooling, a learnable shift and a sigmoid.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::projection::{make_angles, mip, AngleSet, Backprojector, Span};
use crate::seed::mix;
use crate::tensor::{Real, Tensor};
use crate::unet::{BnUpdate, Mode, UNetArch, UNetConfig};
use crate::volume::{Image, Volume};

/// How branch activations are kept for the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchSchedule {
    /// One tape holds every branch.
    Retain,
    /// Branches run without a tape first; each is re-run on its own tape
    /// when its output gradient is known, so only one branch tape is alive
    /// at a time.
    #[default]
    Recompute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Net25DConfig {
    pub p: usize,
    pub unet: UNetConfig,
    pub shift_init: f64,
    pub filter_init: [f64; 3],
    pub schedule: BranchSchedule,
}

impl Default for Net25DConfig {
    fn default() -> Self {
        Self { p: 12, unet: UNetConfig::paper_2d(), shift_init: 0.0, filter_init: [0.0, 1.0, 0.0], schedule: BranchSchedule::Recompute }
    }
}

/// Parameter layout of a projection network.
#[derive(Clone, Debug)]
pub struct Net25DArch {
    pub cfg: Net25DConfig,
    pub angles: AngleSet,
    pub unet: UNetArch,
    filters: Vec<(ParamId, ParamId)>,
    shift: ParamId,
}

#[derive(Clone, Debug)]
pub struct Net25D<T: Real> {
    pub arch: Net25DArch,
    pub params: ParamStore<T>,
}

pub fn build_net25d(cfg: &Net25DConfig, seed: u64) -> Result<Net25D<f32>> {
    if cfg.unet.dims != 2 {
        return Err(Error::Config("the projection network needs a 2D U-net".into()));
    }
    let angles = make_angles(cfg.p, Span::Half)?;
    let mut params = ParamStore::new();
    let unet = UNetArch::register(&cfg.unet, &mut params, "unet.", seed)?;
    let mut filters = Vec::with_capacity(cfg.p);
    for i in 0..cfg.p {
        let k = cfg.filter_init.map(|v| v as f32).to_vec();
        let w = params.register(format!("filter{i}.w"), Tensor::from_vec(&[1, 1, 1, 3], k)?, true)?;
        let b = params.register(format!("filter{i}.b"), Tensor::zeros(&[1]), true)?;
        filters.push((w, b));
    }
    let shift = params.register("shift", Tensor::scalar(cfg.shift_init as f32), true)?;
    Ok(Net25D { arch: Net25DArch { cfg: cfg.clone(), angles, unet, filters, shift }, params })
}

/// The projection images a volume contributes, one per direction.
pub fn projections<T: Real>(x: &Volume<T>, angles: &[f64]) -> Vec<Image<T>> {
    angles.iter().map(|&a| mip(x, a)).collect()
}

fn branch_mode(mode: Mode, i: usize) -> Mode {
    match mode {
        Mode::Train { seed } => Mode::Train { seed: mix(seed, 1000 + i as u64) },
        Mode::Infer => Mode::Infer,
    }
}

impl Net25DArch {
    pub fn filter_params(&self, i: usize) -> (ParamId, ParamId) {
        self.filters[i]
    }

    pub fn shift_param(&self) -> ParamId {
        self.shift
    }

    fn check(&self, extents: [usize; 3], mips: usize) -> Result<()> {
        if mips != self.angles.p {
            return Err(Error::Shape(format!("{} projections for {} directions", mips, self.angles.p)));
        }
        let m = 1usize << self.cfg.unet.depth;
        if !extents[1].is_multiple_of(m) || !extents[2].is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "extents {extents:?}: b and c must be divisible by {m}; crop the input first"
            )));
        }
        Ok(())
    }

    /// U-net and filtration for direction `i`, recorded on `tape`.
    pub fn branch<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        img: &Image<T>,
        i: usize,
        mode: Mode,
    ) -> Result<(Var, Vec<BnUpdate>)> {
        let x = tape.constant(Tensor::from_vec(&[1, 1, img.rows, img.cols], img.data.clone())?);
        let (u, bn) = self.unet.forward(store, tape, x, branch_mode(mode, i))?;
        let (w, b) = self.filters[i];
        let (w, b) = (tape.param(store, w), tape.param(store, b));
        Ok((tape.conv(u, w, Some(b), true)?, bn))
    }

    /// Backprojection, pooling, shift and sigmoid applied to the filtered
    /// branch outputs.
    pub fn head<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, branches: &[Var], a: usize) -> Result<Var> {
        let s = tape.value(branches[0]).shape().to_vec();
        let bp = Backprojector::new(&self.angles.angles, [a, s[2], s[3]]);
        let r = tape.linear_op(branches, bp as Arc<_>);
        let pooled = tape.avg_pool_same(r, &[2, 2, 2])?;
        let beta = tape.param(store, self.shift);
        let shifted = tape.add_scalar(pooled, beta)?;
        Ok(tape.sigmoid(shifted))
    }

    /// Whole network on one tape.
    pub fn record<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        mips: &[Image<T>],
        a: usize,
        mode: Mode,
    ) -> Result<(Var, Vec<BnUpdate>)> {
        self.check([a, mips[0].rows, mips[0].cols], mips.len())?;
        let mut outs = Vec::with_capacity(mips.len());
        let mut updates = Vec::new();
        for (i, img) in mips.iter().enumerate() {
            let (v, bn) = self.branch(store, tape, img, i, mode)?;
            outs.push(v);
            updates.extend(bn);
        }
        Ok((self.head(store, tape, &outs, a)?, updates))
    }
}

impl<T: Real> Net25D<T> {
    pub fn count_params(&self) -> usize {
        self.params.count_trainable()
    }

    pub fn angles(&self) -> &[f64] {
        &self.arch.angles.angles
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Net25D<U> {
        Net25D { arch: self.arch.clone(), params: self.params.cast() }
    }

    /// Probability volume for `x`.
    pub fn forward(&self, x: &Volume<T>) -> Result<Volume<T>> {
        let mips = projections(x, self.angles());
        let [a, b, c] = x.extents();
        self.arch.check([a, b, c], mips.len())?;
        let mut outs = Vec::with_capacity(mips.len());
        let mut head = Tape::new();
        for (i, img) in mips.iter().enumerate() {
            let mut tape = Tape::new();
            let (v, _) = self.arch.branch(&self.params, &mut tape, img, i, Mode::Infer)?;
            outs.push(head.constant(tape.value(v).clone()));
        }
        let y = self.arch.head(&self.params, &mut head, &outs, a)?;
        Volume::new([a, b, c], head.value(y).data().to_vec())
    }

    /// Binary mask with `probability >= 0.5`.
    pub fn predict_mask(&self, x: &Volume<T>) -> Result<Volume<u8>> {
        Ok(self.forward(x)?.map(|v| u8::from(v.f64() >= 0.5)))
    }

    /// Dice loss of `x` against `truth`; adds the parameter gradients into
    /// the store and returns the batchnorm statistics of the step.
    pub fn loss_and_grad(
        &mut self,
        x: &Volume<T>,
        truth: &Volume<u8>,
        seed: u64,
        schedule: BranchSchedule,
    ) -> Result<(f64, Vec<BnUpdate>)> {
        if x.extents() != truth.extents() {
            return Err(Error::Shape("volume and mask extents differ".into()));
        }
        let mips = projections(x, self.angles());
        let a = x.extents()[0];
        let t = Tensor::from_vec(&[1, 1, a, x.extents()[1], x.extents()[2]], truth.data().iter().map(|&m| T::of(f64::from(m))).collect())?;
        let mode = Mode::Train { seed };
        match schedule {
            BranchSchedule::Retain => {
                let mut tape = Tape::new();
                let (y, bn) = self.arch.record(&self.params, &mut tape, &mips, a, mode)?;
                let loss = tape.dice_loss(y, &t)?;
                tape.backward(loss)?;
                self.params.pull_grads(&tape);
                Ok((tape.value(loss).data()[0].f64(), bn))
            }
            BranchSchedule::Recompute => {
                self.arch.check(x.extents(), mips.len())?;
                let mut head = Tape::new();
                let mut outs = Vec::with_capacity(mips.len());
                let mut updates = Vec::new();
                for (i, img) in mips.iter().enumerate() {
                    let mut tape = Tape::new();
                    let (v, bn) = self.arch.branch(&self.params, &mut tape, img, i, mode)?;
                    outs.push(head.leaf(tape.value(v).clone(), true));
                    updates.extend(bn);
                }
                let y = self.arch.head(&self.params, &mut head, &outs, a)?;
                let loss = head.dice_loss(y, &t)?;
                head.backward(loss)?;
                self.params.pull_grads(&head);
                for (i, img) in mips.iter().enumerate() {
                    let Some(g) = head.grad(outs[i]).cloned() else { continue };
                    let mut tape = Tape::new();
                    let (v, _) = self.arch.branch(&self.params, &mut tape, img, i, mode)?;
                    tape.backward_with(v, g)?;
                    self.params.pull_grads(&tape);
                }
                Ok((head.value(loss).data()[0].f64(), updates))
            }
        }
    }
}

impl Net25D<f32> {
    /// Writes parameters and the direction set.
    pub fn save(&self, path: &Path) -> Result<()> {
        let angles = self.angles().iter().map(|&a| a as f32).collect();
        checkpoint::save(path, &self.params, &[("angles".into(), Tensor::from_vec(&[self.arch.angles.p], angles)?)])
    }

    /// Loads a checkpoint written for the same configuration.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let extra = checkpoint::load_into(path, &mut self.params)?;
        let stored = extra.iter().find(|(n, _)| n == "angles").map(|(_, t)| t.data().to_vec());
        let ours: Vec<f32> = self.angles().iter().map(|&a| a as f32).collect();
        match stored {
            Some(s) if s == ours => Ok(()),
            Some(s) => Err(Error::Format { format: "MSEG", reason: format!("checkpoint angles {s:?} differ from {ours:?}") }),
            None => Err(Error::Format { format: "MSEG", reason: "checkpoint has no angle set".into() }),
        }
    }

    /// Copies U-net weights from a standalone 2D U-net checkpoint.
    pub fn warm_start_unet(&mut self, path: &Path) -> Result<()> {
        let records = checkpoint::read_records(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let mut copied = 0;
        for (name, t) in records {
            if let Some(id) = self.params.find(&format!("unet.{name}")) {
                if self.params.value(id).shape() != t.shape() {
                    return Err(Error::Config(format!("warm start: {name} has shape {:?}", t.shape())));
                }
                self.params.get_mut(id).value = t;
                copied += 1;
            }
        }
        if copied == 0 {
            return Err(Error::Config("warm start checkpoint shares no U-net parameters".into()));
        }
        Ok(())
    }
}
