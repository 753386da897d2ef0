use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accumulate, threshold_mask, ConfusionCounts, MetricSet};
use crate::net25d::Net25D;
use crate::phantom::{MipPair, Sample};
use crate::unet::{crop_to_divisible, embed, UNet};
use crate::volume::{Image, Volume};

use super::tasks::dice_loss_value;

/// Applies a 2D U-net to every axis-`a` slice independently.
pub fn run_slicewise_2d(unet: &UNet<f32>, v: &Volume<f32>) -> Result<Volume<f32>> {
    let [a, ..] = v.extents();
    let slices = (0..a).map(|i| unet.predict_image(&v.slice_a(i))).collect::<Result<Vec<Image<f32>>>>()?;
    Volume::from_slices(&slices)
}

/// A trained volumetric segmenter.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    UNet3D(&'a UNet<f32>),
    SliceWise(&'a UNet<f32>),
    Net25D(&'a Net25D<f32>),
}

impl Predictor<'_> {
    /// Probability volume with the input's extents; voxels removed by the
    /// divisibility crop get probability 0.
    pub fn predict(&self, v: &Volume<f32>) -> Result<Volume<f32>> {
        match *self {
            Predictor::UNet3D(net) => {
                let d = net.arch.cfg.depth;
                let (c, rec) = crop_to_divisible(v, [d; 3])?;
                embed(&net.predict_volume(&c)?, &rec)
            }
            Predictor::SliceWise(net) => {
                let d = net.arch.cfg.depth;
                let (c, rec) = crop_to_divisible(v, [0, d, d])?;
                embed(&run_slicewise_2d(net, &c)?, &rec)
            }
            Predictor::Net25D(net) => {
                let d = net.arch.cfg.unet.depth;
                let (c, rec) = crop_to_divisible(v, [0, d, d])?;
                embed(&net.forward(&c)?, &rec)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample_id: String,
    pub loss: f64,
    pub counts: ConfusionCounts,
    pub metrics: MetricSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<SampleRow>,
    /// Counts summed over all rows; the headline metrics come from these.
    pub counts: ConfusionCounts,
    pub metrics: MetricSet,
    pub mean_loss: f64,
    pub apply_seconds: f64,
}

fn summarize(rows: Vec<SampleRow>, apply_seconds: f64) -> EvalSummary {
    let mut counts = ConfusionCounts::default();
    for r in &rows {
        counts.add(&r.counts);
    }
    let mean_loss = rows.iter().map(|r| r.loss).sum::<f64>() / rows.len().max(1) as f64;
    EvalSummary { metrics: MetricSet::of(&counts), rows, counts, mean_loss, apply_seconds }
}

fn row(id: &str, prob: &[f32], truth: &[u8], threshold: f64) -> Result<SampleRow> {
    let pred = threshold_mask(prob, threshold);
    let counts = accumulate(&pred, truth)?;
    let t: Vec<f32> = truth.iter().map(|&m| f32::from(m)).collect();
    Ok(SampleRow { sample_id: id.to_string(), loss: dice_loss_value(prob, &t), counts, metrics: MetricSet::of(&counts) })
}

/// Thresholded volumetric predictions against the sample masks.
pub fn evaluate(pred: Predictor<'_>, samples: &[Sample], threshold: f64) -> Result<EvalSummary> {
    evaluate_with(|s| pred.predict(&s.volume), samples, threshold)
}

/// [`evaluate`] for an arbitrary probability source.
pub fn evaluate_with<F>(predict: F, samples: &[Sample], threshold: f64) -> Result<EvalSummary>
where
    F: Fn(&Sample) -> Result<Volume<f32>>,
{
    if samples.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let start = Instant::now();
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let p = predict(s)?;
        if p.extents() != s.mask.extents() {
            return Err(Error::Shape(format!("{}: prediction extents {:?}", s.id, p.extents())));
        }
        rows.push(row(&s.id, p.data(), s.mask.data(), threshold)?);
    }
    Ok(summarize(rows, start.elapsed().as_secs_f64()))
}

/// Thresholded 2D predictions on projection pairs.
pub fn evaluate_mip(unet: &UNet<f32>, pairs: &[MipPair], threshold: f64) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let d = unet.arch.cfg.depth;
    let start = Instant::now();
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let img = Volume::new([1, p.image.rows, p.image.cols], p.image.data.clone())?;
        let (c, rec) = crop_to_divisible(&img, [0, d, d])?;
        let out = unet.predict_image(&c.slice_a(0))?;
        let full = embed(&Volume::new(rec.kept, out.data)?, &rec)?;
        rows.push(row(&format!("{}@{}", p.sample_id, p.angle), full.data(), &p.mask.data, threshold)?);
    }
    Ok(summarize(rows, start.elapsed().as_secs_f64()))
}
