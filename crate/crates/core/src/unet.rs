//! 2D and 3D U-nets: contracting path of conv blocks with max pooling,
//! upsampling path of transposed convolutions and skip concatenations, and a
//! 1x1 convolution head with sigmoid output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::seed::mix;
use crate::tensor::{Real, Tensor};
use crate::volume::{Image, Volume};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

/// Standard deviation law for the initial conv weights (biases start at 0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitLaw {
    /// `1 / f` with `f` the number of scalar weights in the layer.
    #[default]
    WeightCount,
    /// `1 / sqrt(fan_in)`.
    FanIn,
    /// `sqrt(2 / fan_in)`.
    He,
}

impl InitLaw {
    fn std(self, weight_count: usize, fan_in: usize) -> f64 {
        match self {
            InitLaw::WeightCount => 1.0 / weight_count as f64,
            InitLaw::FanIn => 1.0 / (fan_in as f64).sqrt(),
            InitLaw::He => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub dims: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub dropout_deepest: f64,
    pub dropout_second: f64,
    pub use_batchnorm: bool,
    pub init: InitLaw,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::paper_2d()
    }
}

impl UNetConfig {
    /// 32 filters doubling over four pooling levels to 512.
    pub fn paper_2d() -> Self {
        Self {
            dims: 2,
            base_filters: 32,
            depth: 4,
            dropout_deepest: 0.5,
            dropout_second: 0.2,
            use_batchnorm: true,
            init: InitLaw::WeightCount,
        }
    }

    /// 4 filters doubling over two pooling levels to 16.
    pub fn paper_3d() -> Self {
        Self { dims: 3, base_filters: 4, depth: 2, ..Self::paper_2d() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::Config(format!("U-net dims must be 2 or 3, got {}", self.dims)));
        }
        if self.base_filters == 0 {
            return Err(Error::Config("base_filters must be positive".into()));
        }
        for r in [self.dropout_deepest, self.dropout_second] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    /// Dropout rate of the block at `level` (same on both paths).
    pub fn dropout_at(&self, level: usize) -> f64 {
        if level == self.depth {
            self.dropout_deepest
        } else if level + 1 == self.depth {
            self.dropout_second
        } else {
            0.0
        }
    }

    fn kernel(&self, k: usize) -> Vec<usize> {
        vec![k; self.dims]
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    updates: ParamId,
}

#[derive(Clone, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    norm: Option<Norm>,
    c1: Conv,
    c2: Conv,
    dropout: f64,
}

/// Parameter layout of one U-net inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct UNetArch {
    pub cfg: UNetConfig,
    down: Vec<Block>,
    up: Vec<(Conv, Block)>,
    head: Conv,
}

/// Observed batch statistics to fold into the running averages.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    updates: ParamId,
    stats: BatchStats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics and dropout; `seed` selects the dropout masks.
    Train { seed: u64 },
    Infer,
}

struct Init<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    law: InitLaw,
    prefix: String,
}

impl<T: Real> Init<'_, T> {
    fn conv(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, bias_len: usize) -> Result<Conv> {
        let count: usize = shape.iter().product();
        let normal = Normal::new(0.0, self.law.std(count, fan_in)).expect("finite std");
        let data = (0..count).map(|_| T::of(normal.sample(&mut self.rng))).collect();
        let w = self.store.register(format!("{}{name}.w", self.prefix), Tensor::from_vec(&shape, data)?, true)?;
        let b = self.store.register(format!("{}{name}.b", self.prefix), Tensor::zeros(&[bias_len]), true)?;
        Ok(Conv { w, b })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm> {
        let p = format!("{}{name}", self.prefix);
        Ok(Norm {
            gamma: self.store.register(format!("{p}.gamma"), Tensor::full(&[c], T::one()), true)?,
            beta: self.store.register(format!("{p}.beta"), Tensor::zeros(&[c]), true)?,
            mean: self.store.register(format!("{p}.running_mean"), Tensor::zeros(&[c]), false)?,
            var: self.store.register(format!("{p}.running_var"), Tensor::full(&[c], T::one()), false)?,
            updates: self.store.register(format!("{p}.updates"), Tensor::scalar(T::zero()), false)?,
        })
    }

    fn block(&mut self, cfg: &UNetConfig, name: &str, c_in: usize, c_out: usize, dropout: f64) -> Result<Block> {
        let taps = 3usize.pow(cfg.dims as u32);
        let norm = if cfg.use_batchnorm { Some(self.norm(&format!("{name}.bn"), c_in)?) } else { None };
        let mut shape = vec![c_out, c_in];
        shape.extend(cfg.kernel(3));
        let c1 = self.conv(&format!("{name}.conv1"), shape, c_in * taps, c_out)?;
        let mut shape = vec![c_out, c_out];
        shape.extend(cfg.kernel(3));
        let c2 = self.conv(&format!("{name}.conv2"), shape, c_out * taps, c_out)?;
        Ok(Block { norm, c1, c2, dropout })
    }
}

impl UNetArch {
    /// Registers every parameter under `prefix` and draws the initial weights
    /// from a stream determined by `seed`.
    pub fn register<T: Real>(cfg: &UNetConfig, store: &mut ParamStore<T>, prefix: &str, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init { store, rng: ChaCha8Rng::seed_from_u64(seed), law: cfg.init, prefix: prefix.to_string() };
        let mut down = Vec::with_capacity(cfg.depth + 1);
        for l in 0..=cfg.depth {
            let c_in = if l == 0 { 1 } else { cfg.filters(l - 1) };
            down.push(init.block(cfg, &format!("down{l}"), c_in, cfg.filters(l), cfg.dropout_at(l))?);
        }
        let mut up = Vec::with_capacity(cfg.depth);
        for l in (0..cfg.depth).rev() {
            let (c_hi, c) = (cfg.filters(l + 1), cfg.filters(l));
            let mut shape = vec![c_hi, c];
            shape.extend(cfg.kernel(2));
            let t = init.conv(&format!("up{l}.transpose"), shape, c_hi, c)?;
            let block = init.block(cfg, &format!("up{l}"), 2 * c, c, cfg.dropout_at(l))?;
            up.push((t, block));
        }
        let mut shape = vec![1, cfg.filters(0)];
        shape.extend(cfg.kernel(1));
        let head = init.conv("head", shape, cfg.filters(0), 1)?;
        Ok(Self { cfg: cfg.clone(), down, up, head })
    }

    /// Head weight and bias, e.g. to zero the output layer.
    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head.w, self.head.b)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let rank = self.cfg.dims + 2;
        if shape.len() != rank || shape[1] != 1 {
            return Err(Error::Shape(format!("U-net expects [N, 1, spatial x{}], got {shape:?}", self.cfg.dims)));
        }
        let m = 1usize << self.cfg.depth;
        if shape[2..].iter().any(|e| e % m != 0) {
            return Err(Error::Shape(format!(
                "spatial extents {:?} are not divisible by {m}; crop the input first",
                &shape[2..]
            )));
        }
        Ok(())
    }

    fn block_fwd<T: Real>(
        &self,
        blk: &Block,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        mut x: Var,
        mode: Mode,
        tag: u64,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        if let Some(n) = &blk.norm {
            let (g, b) = (tape.param(store, n.gamma), tape.param(store, n.beta));
            x = match mode {
                Mode::Train { .. } => {
                    let (y, stats) = tape.batch_norm_train(x, g, b, BN_EPS)?;
                    updates.push(BnUpdate { mean: n.mean, var: n.var, updates: n.updates, stats });
                    y
                }
                Mode::Infer => {
                    let mean: Vec<f64> = store.value(n.mean).data().iter().map(|v| v.f64()).collect();
                    let var: Vec<f64> = store.value(n.var).data().iter().map(|v| v.f64()).collect();
                    tape.batch_norm_infer(x, g, b, &mean, &var, BN_EPS)?
                }
            };
        }
        for c in [&blk.c1, &blk.c2] {
            let (w, b) = (tape.param(store, c.w), tape.param(store, c.b));
            x = tape.conv(x, w, Some(b), true)?;
            x = tape.relu(x);
        }
        Ok(match mode {
            Mode::Train { seed } => tape.dropout(x, blk.dropout, true, mix(seed, tag)),
            Mode::Infer => x,
        })
    }

    /// Records the forward pass on `tape`. Returns the probability map and,
    /// in training mode, the batchnorm statistics to pass to
    /// [`UNetArch::commit_bn`] once the step is accepted.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Vec<BnUpdate>)> {
        self.check_input(tape.value(x).shape())?;
        let pool = self.cfg.kernel(2);
        let mut updates = Vec::new();
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut h = x;
        for (l, blk) in self.down.iter().enumerate() {
            if l > 0 {
                h = tape.max_pool(h, &pool)?;
            }
            h = self.block_fwd(blk, store, tape, h, mode, l as u64, &mut updates)?;
            if l < self.cfg.depth {
                skips.push(h);
            }
        }
        for (i, (t, blk)) in self.up.iter().enumerate() {
            let (w, b) = (tape.param(store, t.w), tape.param(store, t.b));
            let u = tape.conv_transpose(h, w, Some(b))?;
            let skip = skips.pop().expect("one skip per level");
            let cat = tape.concat_channels(skip, u)?;
            h = self.block_fwd(blk, store, tape, cat, mode, 100 + i as u64, &mut updates)?;
        }
        let (w, b) = (tape.param(store, self.head.w), tape.param(store, self.head.b));
        let logits = tape.conv(h, w, Some(b), true)?;
        Ok((tape.sigmoid(logits), updates))
    }

    /// Folds batch statistics into the running averages: an exponential
    /// average with momentum [`BN_MOMENTUM`], bias-corrected so that the
    /// first update takes the batch statistics as they are.
    pub fn commit_bn<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate]) {
        for u in updates {
            let t = store.value(u.updates).data()[0].f64() + 1.0;
            store.get_mut(u.updates).value.data_mut()[0] = T::of(t);
            let w = (1.0 - BN_MOMENTUM) / (1.0 - BN_MOMENTUM.powf(t));
            for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
                let run = &mut store.get_mut(id).value;
                for (r, b) in run.data_mut().iter_mut().zip(batch) {
                    *r = T::of((1.0 - w) * r.f64() + w * b);
                }
            }
        }
    }

    /// Shape-level walk of the forward pass.
    pub fn profile(&self, spatial: &[usize], batch: usize) -> Result<Profile> {
        profile(&self.cfg, spatial, batch)
    }
}

/// A standalone U-net owning its parameters.
#[derive(Clone, Debug)]
pub struct UNet<T: Real> {
    pub arch: UNetArch,
    pub params: ParamStore<T>,
}

pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<UNet<f32>> {
    let mut params = ParamStore::new();
    let arch = UNetArch::register(cfg, &mut params, "", seed)?;
    Ok(UNet { arch, params })
}

impl<T: Real> UNet<T> {
    pub fn count_params(&self) -> usize {
        count_params(&self.params)
    }

    /// Inference on a `[N, 1, ...]` batch.
    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input);
        let (y, _) = self.arch.forward(&self.params, &mut tape, x, Mode::Infer)?;
        Ok(tape.value(y).clone())
    }

    pub fn predict_image(&self, img: &Image<T>) -> Result<Image<T>> {
        if self.arch.cfg.dims != 2 {
            return Err(Error::Shape("predict_image needs a 2D U-net".into()));
        }
        let t = Tensor::from_vec(&[1, 1, img.rows, img.cols], img.data.clone())?;
        Ok(Image { rows: img.rows, cols: img.cols, data: self.predict(t)?.into_data() })
    }

    pub fn predict_volume(&self, v: &Volume<T>) -> Result<Volume<T>> {
        if self.arch.cfg.dims != 3 {
            return Err(Error::Shape("predict_volume needs a 3D U-net".into()));
        }
        let [a, b, c] = v.extents();
        let t = Tensor::from_vec(&[1, 1, a, b, c], v.data().to_vec())?;
        Volume::new([a, b, c], self.predict(t)?.into_data())
    }
}

/// Number of trainable scalars (conv weights and biases, batchnorm affine
/// terms); running statistics are excluded.
pub fn count_params<T: Real>(store: &ParamStore<T>) -> usize {
    store.count_trainable()
}

/// Sizes gathered by walking a U-net forward pass without running it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub params: usize,
    /// Scalars held on the tape after a training forward pass: every node
    /// output plus the per-node side buffers its adjoint needs.
    pub tape_scalars: usize,
    /// Largest transient im2col buffer.
    pub workspace_scalars: usize,
    /// Multiply-accumulates of one forward pass.
    pub forward_macs: u64,
}

pub fn profile(cfg: &UNetConfig, spatial: &[usize], batch: usize) -> Result<Profile> {
    cfg.validate()?;
    if spatial.len() != cfg.dims {
        return Err(Error::Shape(format!("{}D U-net given extents {spatial:?}", cfg.dims)));
    }
    let m = 1usize << cfg.depth;
    if spatial.iter().any(|e| e % m != 0) {
        return Err(Error::Shape(format!("extents {spatial:?} not divisible by {m}")));
    }
    let taps3 = 3usize.pow(cfg.dims as u32);
    let taps2 = 2usize.pow(cfg.dims as u32);
    let mut p = Profile::default();
    let vox = |l: usize| batch * spatial.iter().map(|e| e >> l).product::<usize>();
    let block = |p: &mut Profile, l: usize, c_in: usize, c_out: usize| {
        let v = vox(l);
        if cfg.use_batchnorm {
            p.params += 2 * c_in;
            p.tape_scalars += 2 * c_in * v; // output and normalized copy
        }
        for ci in [c_in, c_out] {
            p.params += c_out * ci * taps3 + c_out;
            p.forward_macs += (v * c_out * ci * taps3) as u64;
            p.workspace_scalars = p.workspace_scalars.max(ci * taps3 * v / batch);
            p.tape_scalars += 2 * c_out * v; // conv and relu outputs
        }
        if cfg.dropout_at(l) > 0.0 {
            p.tape_scalars += 2 * c_out * v; // output and mask
        }
    };
    for l in 0..=cfg.depth {
        if l > 0 {
            // pooled output plus argmax indices
            p.tape_scalars += 2 * cfg.filters(l - 1) * vox(l);
        }
        block(&mut p, l, if l == 0 { 1 } else { cfg.filters(l - 1) }, cfg.filters(l));
    }
    for l in (0..cfg.depth).rev() {
        let (c_hi, c) = (cfg.filters(l + 1), cfg.filters(l));
        p.params += c_hi * c * taps2 + c;
        p.forward_macs += (vox(l + 1) * c_hi * c * taps2) as u64;
        p.tape_scalars += c * vox(l) + 2 * c * vox(l); // upsampled, concatenated
        block(&mut p, l, 2 * c, c);
    }
    p.params += cfg.filters(0) + 1;
    p.forward_macs += (vox(0) * cfg.filters(0)) as u64;
    p.tape_scalars += 2 * vox(0); // logits, probabilities
    Ok(p)
}

/// Symmetric crop bringing `extent` down to a multiple of `2^levels`; the
/// extra voxel of an odd remainder comes off the high end.
pub fn crop_extent(extent: usize, levels: usize) -> Result<(usize, (usize, usize))> {
    let m = 1usize << levels;
    let kept = extent / m * m;
    if kept == 0 {
        return Err(Error::Shape(format!("extent {extent} is smaller than {m}")));
    }
    let r = extent - kept;
    Ok((kept, (r / 2, r - r / 2)))
}

/// Where a cropped volume sits inside its original extents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRecord {
    pub original: [usize; 3],
    pub lo: [usize; 3],
    pub kept: [usize; 3],
}

/// Crops each axis to a multiple of `2^levels[axis]`.
pub fn crop_to_divisible<T: Copy + Default>(v: &Volume<T>, levels: [usize; 3]) -> Result<(Volume<T>, CropRecord)> {
    let original = v.extents();
    let mut lo = [0; 3];
    let mut kept = [0; 3];
    for ax in 0..3 {
        let (k, (l, _)) = crop_extent(original[ax], levels[ax])?;
        kept[ax] = k;
        lo[ax] = l;
    }
    let mut data = Vec::with_capacity(kept.iter().product());
    for i in 0..kept[0] {
        for j in 0..kept[1] {
            let start = v.index(i + lo[0], j + lo[1], lo[2]);
            data.extend_from_slice(&v.data()[start..start + kept[2]]);
        }
    }
    Ok((Volume::new(kept, data)?, CropRecord { original, lo, kept }))
}

/// Places a cropped-domain volume back into the original extents, zero
/// elsewhere.
pub fn embed<T: Copy + Default>(v: &Volume<T>, rec: &CropRecord) -> Result<Volume<T>> {
    if v.extents() != rec.kept {
        return Err(Error::Shape(format!("volume {:?} does not match crop {:?}", v.extents(), rec.kept)));
    }
    let mut out = Volume::zeros(rec.original);
    let c = rec.kept[2];
    for i in 0..rec.kept[0] {
        for j in 0..rec.kept[1] {
            let dst = out.index(i + rec.lo[0], j + rec.lo[1], rec.lo[2]);
            let src = v.index(i, j, 0);
            out.data_mut()[dst..dst + c].copy_from_slice(&v.data()[src..src + c]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_examples() {
        assert_eq!(crop_extent(96, 4).unwrap(), (96, (0, 0)));
        assert_eq!(crop_extent(100, 4).unwrap(), (96, (2, 2)));
        assert_eq!(crop_extent(17, 1).unwrap(), (16, (0, 1)));
        assert!(crop_extent(7, 3).is_err());
    }

    #[test]
    fn crop_then_embed_round_trips_the_kept_region() {
        let v = Volume::new([3, 5, 6], (0..90).map(|x| x as f32).collect()).unwrap();
        let (c, rec) = crop_to_divisible(&v, [0, 2, 2]).unwrap();
        assert_eq!(c.extents(), [3, 4, 4]);
        assert_eq!(c.get(0, 0, 0), v.get(0, 0, 1));
        let e = embed(&c, &rec).unwrap();
        assert_eq!(e.get(2, 3, 4), v.get(2, 3, 4));
        assert_eq!(e.get(0, 4, 0), 0.0);
    }

    #[test]
    fn profile_matches_registered_parameters() {
        for cfg in [
            UNetConfig { base_filters: 4, depth: 2, ..UNetConfig::paper_2d() },
            UNetConfig { base_filters: 2, depth: 1, ..UNetConfig::paper_3d() },
            UNetConfig { base_filters: 3, depth: 0, use_batchnorm: false, ..UNetConfig::paper_2d() },
        ] {
            let net = build_unet(&cfg, 1).unwrap();
            let ext = vec![8; cfg.dims];
            assert_eq!(net.arch.profile(&ext, 1).unwrap().params, net.count_params());
        }
    }

    #[test]
    fn dropout_placement() {
        let c = UNetConfig::paper_2d();
        assert_eq!(c.dropout_at(4), 0.5);
        assert_eq!(c.dropout_at(3), 0.2);
        assert_eq!(c.dropout_at(2), 0.0);
    }
}
