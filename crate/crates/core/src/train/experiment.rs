//! Side-by-side training of the volumetric approaches on one dataset split.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::net25d::{build_net25d, Net25D, Net25DConfig};
use crate::phantom::{build_mip_dataset, Sample, SplitPlan};
use crate::projection::{make_angles, Span};
use crate::seed::mix;
use crate::unet::{build_unet, UNet, UNetConfig};

use super::eval::{evaluate, evaluate_mip, EvalSummary, Predictor};
use super::resources::{memory_estimate, MemoryEstimate, Model, NetKind};
use super::tasks::{MipTask, Net25DTask, UNet3DTask};
use super::{train, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub seed: u64,
    pub threshold: f64,
    /// Directions used to build the 2D projection training set.
    pub mip_p: usize,
    pub mip_span: Span,
    pub unet2d: UNetConfig,
    pub train2d: TrainConfig,
    pub unet3d: UNetConfig,
    pub train3d: TrainConfig,
    pub net25d: Net25DConfig,
    pub train25d: TrainConfig,
    /// Which of `unet2d-slice`, `unet3d`, `net25d` to run.
    pub models: Vec<NetKind>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        let unet2d = UNetConfig { base_filters: 8, depth: 3, ..UNetConfig::paper_2d() };
        let volumetric = TrainConfig { max_epochs: 60, minibatch: 1, ..TrainConfig::default() };
        Self {
            seed: 0,
            threshold: 0.5,
            mip_p: 10,
            mip_span: Span::Full,
            unet2d: unet2d.clone(),
            train2d: TrainConfig { max_epochs: 30, minibatch: 6, ..TrainConfig::default() },
            unet3d: UNetConfig::paper_3d(),
            train3d: volumetric.clone(),
            net25d: Net25DConfig { p: 4, unet: unet2d, ..Net25DConfig::default() },
            train25d: volumetric,
            models: vec![NetKind::Unet2dSlice, NetKind::Unet3d, NetKind::Net25d],
        }
    }
}

/// One line of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: NetKind,
    pub loss: f64,
    pub ma: f64,
    pub iu: f64,
    pub dc: f64,
    pub params: usize,
    pub train_seconds: f64,
    pub apply_seconds: f64,
    pub memory_bytes: u64,
    pub report: TrainReport,
    pub eval: EvalSummary,
}

fn pick<'a>(samples: &'a [Sample], ids: &[String]) -> Result<Vec<Sample>> {
    let by_id: HashMap<&str, &'a Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| by_id.get(id.as_str()).map(|s| (*s).clone()).ok_or_else(|| Error::Data(format!("unknown sample {id}"))))
        .collect()
}

/// Training, validation and evaluation samples of a split.
pub fn partition(samples: &[Sample], split: &SplitPlan) -> Result<[Vec<Sample>; 3]> {
    Ok([pick(samples, &split.train)?, pick(samples, &split.val)?, pick(samples, &split.eval)?])
}

/// Trains the 2D U-net on projection pairs of the training volumes.
pub fn train_mip_unet(
    cfg: &UNetConfig,
    train_cfg: &TrainConfig,
    p: usize,
    span: Span,
    train_set: &[Sample],
    val_set: &[Sample],
    init_seed: u64,
) -> Result<(UNet<f32>, TrainReport)> {
    let angles = make_angles(p, span)?;
    let tr = build_mip_dataset(train_set, &angles.angles);
    let va = build_mip_dataset(val_set, &angles.angles);
    let mut task = MipTask::new(build_unet(cfg, init_seed)?, &tr, &va)?;
    let report = train(&mut task, train_cfg)?;
    Ok((task.into_net(), report))
}

pub fn train_unet3d(
    cfg: &UNetConfig,
    train_cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    init_seed: u64,
) -> Result<(UNet<f32>, TrainReport)> {
    let mut task = UNet3DTask::new(build_unet(cfg, init_seed)?, train_set, val_set)?;
    let report = train(&mut task, train_cfg)?;
    Ok((task.into_net(), report))
}

pub fn train_net25d(
    cfg: &Net25DConfig,
    train_cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    init_seed: u64,
) -> Result<(Net25D<f32>, TrainReport)> {
    let mut task = Net25DTask::new(build_net25d(cfg, init_seed)?, train_set, val_set)?;
    let report = train(&mut task, train_cfg)?;
    Ok((task.into_net(), report))
}

/// Seed of the initial weights of `kind` in a run seeded with `seed`.
pub fn init_seed(seed: u64, kind: NetKind) -> u64 {
    mix(seed, kind as u64)
}

/// A trained network of any kind.
#[derive(Clone, Debug)]
pub enum TrainedNet {
    UNet(UNet<f32>),
    Net25D(Net25D<f32>),
}

impl TrainedNet {
    /// Writes an MSEG checkpoint (with the angle set for projection nets).
    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            TrainedNet::UNet(n) => checkpoint::save(path, &n.params, &[]),
            TrainedNet::Net25D(n) => n.save(path),
        }
    }
}

/// Result of training and evaluating one approach.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub kind: NetKind,
    pub net: TrainedNet,
    pub report: TrainReport,
    pub eval: EvalSummary,
    pub memory: MemoryEstimate,
}

/// Trains `kind` on the training split (validating on the validation split)
/// and evaluates it on the evaluation split. The projection-image workflow
/// is evaluated on projection pairs, the others on volumes.
pub fn run_model(kind: NetKind, samples: &[Sample], split: &SplitPlan, cfg: &CompareConfig) -> Result<TrainedRun> {
    let [tr, va, ev] = partition(samples, split)?;
    let extents = tr.first().ok_or_else(|| Error::Data("empty training split".into()))?.volume.extents();
    if ev.is_empty() {
        return Err(Error::Data("empty evaluation split".into()));
    }
    let init = init_seed(cfg.seed, kind);
    let run = |net, report, eval, model: Model| -> Result<TrainedRun> {
        Ok(TrainedRun { kind, net, report, eval, memory: memory_estimate(&model, extents)? })
    };
    match kind {
        NetKind::Unet2dMip | NetKind::Unet2dSlice => {
            let t = TrainConfig { seed: cfg.seed, ..cfg.train2d.clone() };
            let (net, rep) = train_mip_unet(&cfg.unet2d, &t, cfg.mip_p, cfg.mip_span, &tr, &va, init)?;
            let eval = if kind == NetKind::Unet2dMip {
                let angles = make_angles(cfg.mip_p, cfg.mip_span)?;
                evaluate_mip(&net, &build_mip_dataset(&ev, &angles.angles), cfg.threshold)?
            } else {
                evaluate(Predictor::SliceWise(&net), &ev, cfg.threshold)?
            };
            let model = Model::UNet2D { cfg: cfg.unet2d.clone(), minibatch: t.minibatch };
            run(TrainedNet::UNet(net), rep, eval, model)
        }
        NetKind::Unet3d => {
            let t = TrainConfig { seed: cfg.seed, ..cfg.train3d.clone() };
            let (net, rep) = train_unet3d(&cfg.unet3d, &t, &tr, &va, init)?;
            let eval = evaluate(Predictor::UNet3D(&net), &ev, cfg.threshold)?;
            run(TrainedNet::UNet(net), rep, eval, Model::UNet3D(cfg.unet3d.clone()))
        }
        NetKind::Net25d => {
            let t = TrainConfig { seed: cfg.seed, ..cfg.train25d.clone() };
            let (net, rep) = train_net25d(&cfg.net25d, &t, &tr, &va, init)?;
            let eval = evaluate(Predictor::Net25D(&net), &ev, cfg.threshold)?;
            run(TrainedNet::Net25D(net), rep, eval, Model::Net25D(cfg.net25d.clone()))
        }
    }
}

impl From<TrainedRun> for CompareRow {
    fn from(r: TrainedRun) -> Self {
        CompareRow {
            model: r.kind,
            loss: r.eval.mean_loss,
            ma: r.eval.metrics.ma.value,
            iu: r.eval.metrics.iu.value,
            dc: r.eval.metrics.dc.value,
            params: r.report.params,
            train_seconds: r.report.wall_seconds,
            apply_seconds: r.eval.apply_seconds,
            memory_bytes: r.memory.total_bytes,
            report: r.report,
            eval: r.eval,
        }
    }
}

/// Trains and evaluates each requested approach with the same split and
/// seed.
pub fn compare(samples: &[Sample], split: &SplitPlan, cfg: &CompareConfig) -> Result<Vec<CompareRow>> {
    if cfg.models.contains(&NetKind::Unet2dMip) {
        return Err(Error::Config("the comparison covers volumetric approaches only".into()));
    }
    cfg.models.iter().map(|&kind| run_model(kind, samples, split, cfg).map(CompareRow::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: usize,
    pub loss: f64,
    pub ma: f64,
    pub iu: f64,
    pub dc: f64,
}

/// One projection network per direction count, identical seeds and split.
pub fn sweep_directions(
    samples: &[Sample],
    split: &SplitPlan,
    p_values: &[usize],
    net: &Net25DConfig,
    train_cfg: &TrainConfig,
    threshold: f64,
) -> Result<Vec<SweepRow>> {
    let [tr, va, ev] = partition(samples, split)?;
    p_values
        .iter()
        .map(|&p| {
            let cfg = Net25DConfig { p, ..net.clone() };
            let (n, _) = train_net25d(&cfg, train_cfg, &tr, &va, init_seed(train_cfg.seed, NetKind::Net25d))?;
            let e = evaluate(Predictor::Net25D(&n), &ev, threshold)?;
            Ok(SweepRow { p, loss: e.mean_loss, ma: e.metrics.ma.value, iu: e.metrics.iu.value, dc: e.metrics.dc.value })
        })
        .collect()
}
