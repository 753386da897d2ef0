//! Synthetic vessel phantoms: long wandering tubes (labelled foreground),
//! short bright segments (labelled background) and Gaussian noise, plus the
//! dataset plumbing around them.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par;
use crate::projection::{mip, mip_mask};
use crate::seed::mix;
use crate::volume::{self, Image, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    /// Inclusive range for the number of labelled vessels.
    pub tubes: [usize; 2],
    pub tube_radius: [f64; 2],
    /// Peak amplitude of the sideways wander of a vessel centerline.
    pub wander: [f64; 2],
    /// Wander periods over the vertical extent.
    pub wander_cycles: [f64; 2],
    pub distractors: [usize; 2],
    pub distractor_radius: [f64; 2],
    pub distractor_length: [f64; 2],
    pub foreground_intensity: [f64; 2],
    pub distractor_intensity: [f64; 2],
    pub background_intensity: [f64; 2],
    pub noise_sigma: f64,
    /// Structures stay inside this distance of the rotation axis so that
    /// every projection direction sees them.
    pub field_radius: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            extents: [32, 64, 64],
            tubes: [2, 4],
            tube_radius: [1.0, 2.0],
            wander: [4.0, 7.0],
            wander_cycles: [1.5, 3.0],
            distractors: [3, 6],
            distractor_radius: [1.2, 2.2],
            distractor_length: [6.0, 14.0],
            foreground_intensity: [0.7, 1.0],
            distractor_intensity: [0.7, 1.0],
            background_intensity: [0.08, 0.12],
            noise_sigma: 0.05,
            field_radius: 13.0,
            seed: 7,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let min_ext = *self.extents.iter().min().unwrap_or(&0) as f64;
        if min_ext < 1.0 {
            return Err(Error::Config("phantom extents must be positive".into()));
        }
        for (name, r) in [
            ("tube_radius", self.tube_radius),
            ("wander", self.wander),
            ("wander_cycles", self.wander_cycles),
            ("distractor_radius", self.distractor_radius),
            ("distractor_length", self.distractor_length),
            ("foreground_intensity", self.foreground_intensity),
            ("distractor_intensity", self.distractor_intensity),
            ("background_intensity", self.background_intensity),
        ] {
            if !(r[0] <= r[1]) || r[0] < 0.0 {
                return Err(Error::Config(format!("{name} range {r:?} is not an ordered nonnegative pair")));
            }
        }
        if self.tubes[0] > self.tubes[1] || self.distractors[0] > self.distractors[1] {
            return Err(Error::Config("count ranges must be ordered".into()));
        }
        let r = self.tube_radius[1].max(self.distractor_radius[1]);
        if 2.0 * r > min_ext {
            return Err(Error::Config(format!("radius {r} does not fit in extents {:?}", self.extents)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.field_radius > 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0 and field_radius > 0".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// A tube around a polyline, in voxel coordinates `(a, b, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tube {
    pub points: Vec<[f64; 3]>,
    pub radius: f64,
    pub intensity: f64,
    pub label: bool,
}

fn seg_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let w = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let t = if dd > 0.0 { ((w[0] * d[0] + w[1] * d[1] + w[2] * d[2]) / dd).clamp(0.0, 1.0) } else { 0.0 };
    (0..3).map(|i| (w[i] - t * d[i]).powi(2)).sum()
}

/// Draws `tube` into `vol`/`mask`: voxels within the radius take the tube
/// intensity (and label), with a one-voxel linear falloff outside.
pub fn rasterize(tube: &Tube, vol: &mut Volume<f32>, mask: &mut Volume<u8>) {
    let ext = vol.extents();
    let reach = tube.radius + 1.0;
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for ax in 0..3 {
        let (mn, mx) = tube.points.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p[ax]), b.max(p[ax])));
        lo[ax] = (mn - reach).floor().max(0.0) as usize;
        hi[ax] = ((mx + reach).ceil().max(-1.0) + 1.0).min(ext[ax] as f64) as usize;
        if lo[ax] >= hi[ax] {
            return;
        }
    }
    for i in lo[0]..hi[0] {
        for j in lo[1]..hi[1] {
            for k in lo[2]..hi[2] {
                let p = [i as f64, j as f64, k as f64];
                let d2 = tube.points.windows(2).map(|s| seg_dist2(p, s[0], s[1])).fold(f64::MAX, f64::min);
                let d2 = if tube.points.len() == 1 { seg_dist2(p, tube.points[0], tube.points[0]) } else { d2 };
                if d2 > reach * reach {
                    continue;
                }
                let d = d2.sqrt();
                let w = (tube.radius + 1.0 - d).clamp(0.0, 1.0) as f32;
                let idx = vol.index(i, j, k);
                let v = &mut vol.data_mut()[idx];
                *v = v.max(w * tube.intensity as f32);
                if tube.label && d <= tube.radius {
                    mask.data_mut()[idx] = 1;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub volume: Volume<f32>,
    pub mask: Volume<u8>,
}

impl Sample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.data().iter().filter(|&&m| m != 0).count() as f64 / self.mask.len() as f64
    }
}

pub fn sample_id(index: usize) -> String {
    format!("phantom-{index:04}")
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn count(rng: &mut ChaCha8Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

/// Uniform point in the disk of radius `r` about the plane center.
fn disk_point(rng: &mut ChaCha8Rng, center: [f64; 2], r: f64) -> [f64; 2] {
    let rho = r.max(0.0) * rng.random::<f64>().sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    [center[0] + rho * phi.cos(), center[1] + rho * phi.sin()]
}

/// Vessel centerline: runs the full vertical extent while winding
/// sinusoidally in both horizontal axes, so that a single slice only cuts
/// short pieces of it.
fn vessel(rng: &mut ChaCha8Rng, spec: &PhantomSpec, center: [f64; 2]) -> Tube {
    let b = spec.extents[1] as f64;
    let radius = uniform(rng, spec.tube_radius);
    let amp = [uniform(rng, spec.wander), uniform(rng, spec.wander)];
    let freq = [uniform(rng, spec.wander_cycles), uniform(rng, spec.wander_cycles)];
    let phase = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
    let room = spec.field_radius - radius - amp[0].max(amp[1]);
    let base = disk_point(rng, center, room);
    let n = b.ceil() as usize + 5;
    let points = (0..n)
        .map(|s| {
            let j = -2.0 + s as f64 * (b + 4.0) / (n - 1) as f64;
            let t = j / b;
            let off = |q: usize| amp[q] * (2.0 * PI * freq[q] * t + phase[q]).sin();
            [base[0] + off(0), j, base[1] + off(1)]
        })
        .collect();
    Tube { points, radius, intensity: uniform(rng, spec.foreground_intensity), label: true }
}

fn distractor(rng: &mut ChaCha8Rng, spec: &PhantomSpec, center: [f64; 2]) -> Tube {
    let radius = uniform(rng, spec.distractor_radius);
    let half = uniform(rng, spec.distractor_length) / 2.0;
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let room = spec.field_radius - radius - half * (dir[0] * dir[0] + dir[2] * dir[2]).sqrt();
    let mid = disk_point(rng, center, room);
    let j = rng.random_range(half..(spec.extents[1] as f64 - half).max(half + 1e-9));
    let p = [mid[0], j, mid[1]];
    let points = vec![
        [p[0] - half * dir[0], p[1] - half * dir[1], p[2] - half * dir[2]],
        [p[0] + half * dir[0], p[1] + half * dir[1], p[2] + half * dir[2]],
    ];
    Tube { points, radius, intensity: uniform(rng, spec.distractor_intensity), label: false }
}

/// Builds phantom `index`; the result depends only on `(spec, index)`.
pub fn generate_phantom(spec: &PhantomSpec, index: usize) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, index as u64));
    let [a, _, c] = spec.extents;
    let center = [(a as f64 - 1.0) / 2.0, (c as f64 - 1.0) / 2.0];
    let background = uniform(&mut rng, spec.background_intensity) as f32;
    let mut vol = Volume::filled(spec.extents, background);
    let mut mask = Volume::zeros(spec.extents);
    let mut tubes = Vec::new();
    for _ in 0..count(&mut rng, spec.tubes) {
        tubes.push(vessel(&mut rng, spec, center));
    }
    for _ in 0..count(&mut rng, spec.distractors) {
        tubes.push(distractor(&mut rng, spec, center));
    }
    for t in &tubes {
        rasterize(t, &mut vol, &mut mask);
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        for v in vol.data_mut() {
            *v = (*v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Sample { id: sample_id(index), volume: vol, mask })
}

/// Generates phantoms `0..count` (in parallel when enabled).
pub fn generate_many(spec: &PhantomSpec, count: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    par::map_range(count, |i| generate_phantom(spec, i)).into_iter().collect()
}

/// One projection training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MipPair {
    pub sample_id: String,
    pub angle: f64,
    pub image: Image<f32>,
    pub mask: Image<u8>,
}

/// Every (sample, direction) pair, sample-major.
pub fn build_mip_dataset(samples: &[Sample], angles: &[f64]) -> Vec<MipPair> {
    let jobs: Vec<(usize, usize)> = (0..samples.len()).flat_map(|s| (0..angles.len()).map(move |q| (s, q))).collect();
    par::map_range(jobs.len(), |n| {
        let (s, q) = jobs[n];
        MipPair {
            sample_id: samples[s].id.clone(),
            angle: angles[q],
            image: mip(&samples[s].volume, angles[q]),
            mask: mip_mask(&samples[s].mask, angles[q]),
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub eval: Vec<String>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

/// Shuffles `ids` and cuts them by `fractions`; validation and evaluation
/// sizes round down and the remainder goes to training.
pub fn split_dataset(ids: &[String], fractions: [f64; 3], seed: u64) -> Result<SplitPlan> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0,1] and sum to 1")));
    }
    let mut order: Vec<String> = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let n = ids.len() as f64;
    let n_val = (n * fractions[1] + 1e-9).floor() as usize;
    let n_eval = (n * fractions[2] + 1e-9).floor() as usize;
    let eval = order.split_off(order.len() - n_eval);
    let val = order.split_off(order.len() - n_val);
    Ok(SplitPlan { train: order, val, eval, fractions, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub volume: PathBuf,
    pub mask: PathBuf,
    pub foreground_fraction: f64,
}

/// Index of a phantom directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: PhantomSpec,
    pub spec_hash: String,
    pub samples: Vec<SampleEntry>,
    pub split: SplitPlan,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

/// Writes `count` phantoms as MVOL pairs plus [`DATASET_MANIFEST`]; paths in
/// the manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, spec: &PhantomSpec, count: usize) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let samples = generate_many(spec, count)?;
    let mut entries = Vec::with_capacity(count);
    for s in &samples {
        let (vp, mp) = (PathBuf::from(format!("{}.vol.mvol", s.id)), PathBuf::from(format!("{}.mask.mvol", s.id)));
        volume::write_volume(&dir.join(&vp), &s.volume)?;
        volume::write_mask(&dir.join(&mp), &s.mask)?;
        entries.push(SampleEntry { id: s.id.clone(), volume: vp, mask: mp, foreground_fraction: s.foreground_fraction() });
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let split = split_dataset(&ids, DEFAULT_FRACTIONS, spec.seed)?;
    let manifest = DatasetManifest { spec: spec.clone(), spec_hash: spec.hash(), samples: entries, split };
    fs::write(dir.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads every sample listed in the manifest, in manifest order.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let m = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(m.samples.len());
    for e in &m.samples {
        let volume = volume::read_f32_volume(&dir.join(&e.volume))?;
        let mask = volume::read_mask(&dir.join(&e.mask))?;
        if volume.extents() != mask.extents() {
            return Err(Error::Data(format!("{}: volume and mask extents differ", e.id)));
        }
        samples.push(Sample { id: e.id.clone(), volume, mask });
    }
    Ok((m, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        let ids: Vec<String> = (0..100).map(sample_id).collect();
        let s = split_dataset(&ids, DEFAULT_FRACTIONS, 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.eval.len()), (70, 15, 15));
        let one = split_dataset(&ids[..1], DEFAULT_FRACTIONS, 3).unwrap();
        assert_eq!((one.train.len(), one.val.len(), one.eval.len()), (1, 0, 0));
        let forty = split_dataset(&ids[..40], DEFAULT_FRACTIONS, 3).unwrap();
        assert_eq!((forty.train.len(), forty.val.len(), forty.eval.len()), (28, 6, 6));
    }

    #[test]
    fn oversized_radius_is_rejected() {
        let spec = PhantomSpec { extents: [4, 8, 8], tube_radius: [1.0, 3.0], ..PhantomSpec::default() };
        assert!(generate_phantom(&spec, 0).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = PhantomSpec::default();
        let b = PhantomSpec { seed: 8, ..a.clone() };
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
